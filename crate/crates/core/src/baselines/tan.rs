use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::{check_fit_args, clamp_prob, class_totals, run_em, BaselineFit, DiscreteMixture};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::{par, seed};

/// One class's directed spanning tree and conditional probability tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTree {
    /// `parent[j]`; exactly one entry (the root) is `None`.
    pub parent: Vec<Option<usize>>,
    /// Topological order starting at the root.
    pub order: Vec<usize>,
    /// `cpt[j][v] = P(x_j = 1 | x_parent = v)`; both entries are equal for
    /// the root.
    pub cpt: Vec<[f64; 2]>,
}

impl ClassTree {
    pub fn validate(&self) -> Result<()> {
        let d = self.parent.len();
        if self.order.len() != d || self.cpt.len() != d {
            return Err(Error::shape("tree arrays must have one entry per variable"));
        }
        let roots = self.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::invalid(format!("tree has {roots} roots")));
        }
        let mut seen = vec![false; d];
        for &j in &self.order {
            if j >= d || seen[j] {
                return Err(Error::invalid("tree order is not a permutation"));
            }
            if let Some(pa) = self.parent[j] {
                if pa >= d || !seen[pa] {
                    return Err(Error::invalid(
                        "tree order visits a child before its parent",
                    ));
                }
            }
            seen[j] = true;
        }
        if self
            .cpt
            .iter()
            .flatten()
            .any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::invalid("CPT entry outside [0, 1]"));
        }
        Ok(())
    }

    /// Undirected edge list `(min, max)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self
            .parent
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|pa| (pa.min(j), pa.max(j))))
            .collect();
        e.sort_unstable();
        e
    }

    fn loglik(&self, x: &[u8]) -> f64 {
        self.parent
            .iter()
            .zip(&self.cpt)
            .zip(x)
            .map(|((pa, row), &v)| {
                let q = row[pa.map_or(0, |p| x[p] as usize)];
                if v == 1 {
                    q.ln()
                } else {
                    (1.0 - q).ln()
                }
            })
            .sum()
    }
}

/// Tree-augmented naive Bayes mixture: a latent class, then the flattened
/// record drawn from that class's tree-structured distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanParams {
    pub timesteps: usize,
    pub n_courses: usize,
    pub theta: Vec<f64>,
    pub trees: Vec<ClassTree>,
    pub vocab_fingerprint: String,
}

impl TanParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta.is_empty() || self.trees.len() != self.theta.len() {
            return Err(Error::shape(
                "theta and trees must have one entry per class",
            ));
        }
        let s: f64 = self.theta.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.theta.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("theta is not a probability vector"));
        }
        for t in &self.trees {
            if t.parent.len() != self.timesteps * self.n_courses {
                return Err(Error::shape("tree size must be T * M"));
            }
            t.validate()?;
        }
        Ok(())
    }
}

impl DiscreteMixture for TanParams {
    fn theta(&self) -> &[f64] {
        &self.theta
    }
    fn timesteps(&self) -> usize {
        self.timesteps
    }
    fn n_courses(&self) -> usize {
        self.n_courses
    }
    fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }
    fn class_loglik(&self, k: usize, x: &[u8]) -> f64 {
        self.trees[k].loglik(x)
    }
    fn sample_class(&self, k: usize, rng: &mut ChaCha8Rng, out: &mut [u8]) {
        let tree = &self.trees[k];
        for &j in &tree.order {
            let q = tree.cpt[j][tree.parent[j].map_or(0, |p| out[p] as usize)];
            out[j] = u8::from(rng.random::<f64>() < q);
        }
    }
}

/// Weighted sufficient statistics of one class.
struct ClassCounts {
    n: f64,
    /// `single[j] = sum w x_j`.
    single: Vec<f64>,
    /// `pair[(a, b)] = sum w x_a x_b`.
    pair: DMatrix<f64>,
}

impl ClassCounts {
    /// Weighted 2x2 table `[x_a][x_b]`.
    fn table(&self, a: usize, b: usize) -> [[f64; 2]; 2] {
        let n11 = self.pair[(a, b)];
        let n10 = (self.single[a] - n11).max(0.0);
        let n01 = (self.single[b] - n11).max(0.0);
        let n00 = (self.n - self.single[a] - self.single[b] + n11).max(0.0);
        [[n00, n01], [n10, n11]]
    }

    fn mutual_information(&self, a: usize, b: usize) -> f64 {
        if self.n <= 0.0 {
            return 0.0;
        }
        let t = self.table(a, b);
        let ra = [t[0][0] + t[0][1], t[1][0] + t[1][1]];
        let cb = [t[0][0] + t[1][0], t[0][1] + t[1][1]];
        let mut mi = 0.0;
        for (va, row) in t.iter().enumerate() {
            for (vb, &c) in row.iter().enumerate() {
                if c > 0.0 {
                    mi += c / self.n * (c * self.n / (ra[va] * cb[vb])).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// Clamped CPTs for a parent map.
    fn cpts(&self, parent: &[Option<usize>]) -> Vec<[f64; 2]> {
        parent
            .iter()
            .enumerate()
            .map(|(j, pa)| {
                let marginal = if self.n > 0.0 {
                    self.single[j] / self.n
                } else {
                    0.5
                };
                match pa {
                    None => [clamp_prob(marginal); 2],
                    Some(p) => {
                        let t = self.table(*p, j);
                        let cond = |v: usize| {
                            let tot = t[v][0] + t[v][1];
                            clamp_prob(if tot > 0.0 { t[v][1] / tot } else { marginal })
                        };
                        [cond(0), cond(1)]
                    }
                }
            })
            .collect()
    }

    /// Expected complete-data log-likelihood of this class under a tree.
    fn objective(&self, parent: &[Option<usize>], cpt: &[[f64; 2]]) -> f64 {
        let mut q = 0.0;
        for (j, pa) in parent.iter().enumerate() {
            let cells: [[f64; 2]; 2] = match pa {
                None => [[0.0, 0.0], [self.n - self.single[j], self.single[j]]],
                Some(p) => self.table(*p, j),
            };
            let rows = if pa.is_none() { 1..2 } else { 0..2 };
            for v in rows {
                let p1 = cpt[j][if pa.is_none() { 0 } else { v }];
                q += cells[v][1] * p1.ln() + cells[v][0] * (1.0 - p1).ln();
            }
        }
        q
    }
}

fn find(uf: &mut [usize], mut a: usize) -> usize {
    while uf[a] != a {
        uf[a] = uf[uf[a]];
        a = uf[a];
    }
    a
}

/// Maximum-weight spanning tree (Kruskal), ties broken by the
/// lexicographically smaller `(a, b)` pair, rooted at variable 0 and
/// oriented breadth-first with neighbours in index order.
fn chow_liu(counts: &ClassCounts, d: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut edges = Vec::with_capacity(d * (d - 1) / 2);
    for a in 0..d {
        for b in (a + 1)..d {
            edges.push((counts.mutual_information(a, b), a, b));
        }
    }
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut uf: Vec<usize> = (0..d).collect();
    let mut adj = vec![Vec::new(); d];
    let mut used = 0;
    for (_, a, b) in edges {
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        if ra != rb {
            uf[ra] = rb;
            adj[a].push(b);
            adj[b].push(a);
            used += 1;
            if used == d - 1 {
                break;
            }
        }
    }
    adj.iter_mut().for_each(|v| v.sort_unstable());
    let mut parent = vec![None; d];
    let mut order = Vec::with_capacity(d);
    let mut seen = vec![false; d];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(j) = queue.pop_front() {
        order.push(j);
        for &nb in &adj[j] {
            if !seen[nb] {
                seen[nb] = true;
                parent[nb] = Some(j);
                queue.push_back(nb);
            }
        }
    }
    (parent, order)
}

/// EM for a mixture of Chow-Liu trees. Each M-step rebuilds every class's
/// tree from responsibility-weighted pairwise mutual information and refits
/// the CPTs; if the rebuilt tree scores below the previous tree refitted to
/// the same counts (possible only through clamping), the previous structure
/// is kept so the likelihood never decreases.
pub fn tan_fit_em(
    c: &Cohort,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<BaselineFit<TanParams>> {
    check_fit_args(c, k, max_iters, tol)?;
    let (t_count, m) = (c.timesteps(), c.n_courses());
    let d = t_count * m;
    if d < 2 {
        return Err(Error::invalid(
            "tree-augmented model needs at least two variables",
        ));
    }
    let n = c.n_students();
    let x = DMatrix::from_fn(n, d, |i, j| c.student(i)[j] as f64);
    let fp = c.vocab().fingerprint();

    let m_step = |resp: &[f64], prev: Option<&TanParams>| {
        let (theta, nk) = class_totals(resp, k);
        let trees = par::map_indexed(k, |kk| {
            let w: Vec<f64> = resp.chunks(k).map(|r| r[kk]).collect();
            let xw = DMatrix::from_fn(n, d, |i, j| x[(i, j)] * w[i]);
            let pair = xw.tr_mul(&x);
            let single = (0..d).map(|j| pair[(j, j)]).collect();
            let counts = ClassCounts {
                n: nk[kk],
                single,
                pair,
            };
            let (parent, order) = chow_liu(&counts, d);
            let cpt = counts.cpts(&parent);
            let fresh = ClassTree { parent, order, cpt };
            match prev.map(|p| &p.trees[kk]) {
                Some(old) if old.edges() != fresh.edges() => {
                    let old_cpt = counts.cpts(&old.parent);
                    let q_old = counts.objective(&old.parent, &old_cpt);
                    let q_new = counts.objective(&fresh.parent, &fresh.cpt);
                    if q_new < q_old {
                        log::debug!("class {kk}: keeping previous tree ({q_new} < {q_old})");
                        ClassTree {
                            parent: old.parent.clone(),
                            order: old.order.clone(),
                            cpt: old_cpt,
                        }
                    } else {
                        fresh
                    }
                }
                _ => fresh,
            }
        });
        TanParams {
            timesteps: t_count,
            n_courses: m,
            theta,
            trees,
            vocab_fingerprint: fp.clone(),
        }
    };
    Ok(run_em(
        c,
        k,
        max_iters,
        tol,
        seed::derive(seed, "tan-init"),
        "tree-augmented",
        m_step,
    ))
}
