import init, { orthant_demo, sankey_demo, infer_demo, infer_demo_layout } from "./pkg/coursepath_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (v, d = 4) => (v === null || v === undefined ? "—" : v.toFixed(d));

function call(fn, ...args) {
  const v = JSON.parse(fn(...args));
  if (v.error) throw new Error(v.error);
  return v;
}

function guard(out, f) {
  try {
    f();
  } catch (e) {
    out.innerHTML = `<p class="error">${e.message}</p>`;
  }
}

// Orthant probabilities ------------------------------------------------------

function runOrthant() {
  const out = $("orthant-out");
  guard(out, () => {
    const v = call(orthant_demo, $("o-pattern").value, num("o-rho"), num("o-k"), num("o-seed"));
    const row = (name, e) =>
      `<tr><td style="text-align:left">${name}</td><td>${fmt(e.value, 6)}</td><td>${fmt(e.std_error, 6)}</td>` +
      `<td>${v.exact === null ? "—" : ((e.value - v.exact) / Math.max(e.std_error, 1e-300)).toFixed(2)}</td></tr>`;
    out.innerHTML =
      `<table><tr><th style="text-align:left">method</th><th>estimate</th><th>std. error</th><th>z vs exact</th></tr>` +
      `<tr><td style="text-align:left">exact</td><td>${fmt(v.exact, 6)}</td><td></td><td></td></tr>` +
      row("product CDF", v.product_cdf) +
      row("nested Monte Carlo", v.nested_mc) +
      `</table>`;
  });
}

// Sankey ---------------------------------------------------------------------

const COLORS = ["#4a7bd0", "#d0784a", "#4ab07b", "#a34ad0", "#c9b13a"];

function drawSankey(data) {
  const width = 820, height = 360, nodeW = 14, pad = 18, top = 20;
  const steps = Math.max(...data.nodes.map((n) => n.timestep)) + 1;
  const colX = (t) => 40 + (t * (width - 120)) / (steps - 1);
  const byStep = Array.from({ length: steps }, (_, t) => data.nodes.filter((n) => n.timestep === t));
  const total = Math.max(...byStep.map((col) => col.reduce((s, n) => s + n.value, 0)));
  const maxNodes = Math.max(...byStep.map((c) => c.length));
  const scale = (height - top - pad * (maxNodes - 1) - 10) / total;

  const pos = {};
  for (const col of byStep) {
    let y = top;
    for (const n of col) {
      pos[n.id] = { x: colX(n.timestep), y, h: n.value * scale, outY: y, inY: y, node: n };
      y += n.value * scale + pad;
    }
  }
  let svg = `<svg width="${width}" height="${height}" viewBox="0 0 ${width} ${height}">`;
  for (const l of data.links) {
    if (l.value <= 0) continue;
    const s = pos[l.source], t = pos[l.target], w = l.value * scale;
    const x0 = s.x + nodeW, x1 = t.x, y0 = s.outY + w / 2, y1 = t.inY + w / 2, xm = (x0 + x1) / 2;
    s.outY += w;
    t.inY += w;
    svg += `<path d="M${x0},${y0} C${xm},${y0} ${xm},${y1} ${x1},${y1}" fill="none" stroke="${COLORS[s.node.state % COLORS.length]}" stroke-opacity="0.35" stroke-width="${Math.max(w, 0.5)}"><title>${l.source} → ${l.target}: ${l.value.toFixed(1)}</title></path>`;
  }
  for (const p of Object.values(pos)) {
    svg += `<rect x="${p.x}" y="${p.y}" width="${nodeW}" height="${Math.max(p.h, 1)}" fill="${COLORS[p.node.state % COLORS.length]}"><title>${p.node.id}: ${p.node.value.toFixed(1)}</title></rect>`;
    svg += `<text x="${p.x + nodeW + 4}" y="${p.y + 12}">state ${p.node.state}</text>`;
  }
  for (let t = 0; t < steps; t++) svg += `<text x="${colX(t)}" y="12">t = ${t}</text>`;
  return svg + "</svg>";
}

function runSankey() {
  const out = $("sankey-out");
  guard(out, () => {
    out.innerHTML = drawSankey(call(sankey_demo, num("s-k"), num("s-stay"), num("s-n"), num("s-seed")));
  });
}

// Intermediate inference -----------------------------------------------------

const layout = { timesteps: 0, n_courses: 0 };
let cells = [];
const SYMBOL = { "?": "?", "1": "1", "0": "0" };
const NEXT = { "?": "1", "1": "0", "0": "?" };

function renderGrid() {
  const m = layout.n_courses;
  let html = "<tr><th></th>" + Array.from({ length: m }, (_, j) => `<th>c${j}</th>`).join("") + "</tr>";
  for (let t = 0; t < layout.timesteps; t++) {
    html += `<tr><th>t = ${t}</th>`;
    for (let j = 0; j < m; j++) {
      const c = cells[t * m + j];
      const cls = c === "1" ? "on" : c === "0" ? "off" : "";
      html += `<td><button type="button" class="${cls}" data-i="${t * m + j}">${SYMBOL[c]}</button></td>`;
    }
    html += "</tr>";
  }
  $("infer-grid").innerHTML = html;
}

function runInfer() {
  const out = $("infer-out");
  guard(out, () => {
    const q = num("i-q");
    const v = call(infer_demo, cells.join(""), q, num("i-stay"), num("i-k"), 7);
    let html = `<table><tr><th style="text-align:left">course</th><th>prior</th><th>predicted</th><th>std. error</th></tr>`;
    v.probability.forEach((p, j) => {
      const observed = p === null ? ` <span class="muted">(observed ${cells[q * layout.n_courses + j]})</span>` : "";
      html += `<tr><td style="text-align:left">c${j}${observed}</td><td>${fmt(v.prior[j], 3)}</td><td>${fmt(p, 3)}</td><td>${fmt(v.std_error[j], 3)}</td></tr>`;
    });
    out.innerHTML = html + "</table>";
  });
}

function setupInfer() {
  Object.assign(layout, call(infer_demo_layout));
  cells = Array(layout.timesteps * layout.n_courses).fill("?");
  // Start with block 0 taken at t = 0 so the rotation is visible at t = 1.
  for (let j = 0; j < layout.n_courses; j++) cells[j] = j < 2 ? "1" : "0";
  $("i-q").innerHTML = Array.from({ length: layout.timesteps }, (_, t) => `<option value="${t}" ${t === 1 ? "selected" : ""}>${t}</option>`).join("");
  $("infer-grid").addEventListener("click", (e) => {
    const i = e.target.dataset?.i;
    if (i === undefined) return;
    cells[i] = NEXT[cells[i]];
    renderGrid();
    runInfer();
  });
  renderGrid();
}

// ---------------------------------------------------------------------------

const onSubmit = (id, f) =>
  $(id).addEventListener("submit", (e) => {
    e.preventDefault();
    f();
  });

await init();
onSubmit("orthant-form", runOrthant);
onSubmit("sankey-form", runSankey);
onSubmit("infer-form", runInfer);
setupInfer();
runOrthant();
runSankey();
runInfer();
