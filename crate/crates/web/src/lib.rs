//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes plain numbers and strings and returns a JSON string;
//! failures are reported as `{"error": "..."}` so the page never has to
//! catch exceptions. The same functions run natively, which is how they
//! are tested.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

use coursepath::cmm::{
    infer_intermediate_with, sample_students, transition_flows, CmmParams, ObservationMask,
    SankeyExport, TimestepObservation,
};
use coursepath::gaussian::{
    orthant_prob_exact_small, orthant_prob_mc, BinaryPattern, MvnParams, ProbEstimate, TailMode,
};
use coursepath::scenario::GeneratorConfig;
use coursepath::seed;

const MAX_DIM: usize = 8;
const MAX_EXACT_DIM: usize = 4;
const MAX_K_MC: u32 = 200_000;
const MAX_STUDENTS: u32 = 20_000;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v)
            .unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string()),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn estimate_json(e: &ProbEstimate) -> serde_json::Value {
    json!({ "value": e.value, "std_error": e.std_error, "sample_count": e.sample_count })
}

fn check_k_mc(k_mc: u32) -> Result<usize, String> {
    if k_mc == 0 || k_mc > MAX_K_MC {
        return Err(format!("sample count must be in 1..={MAX_K_MC}"));
    }
    Ok(k_mc as usize)
}

/// Probability that an equicorrelated standard normal vector has the sign
/// pattern `pattern` (a string of `0`/`1`), by the product-CDF and nested
/// Monte-Carlo estimators and, for up to four dimensions, by quadrature.
#[wasm_bindgen]
pub fn orthant_demo(pattern: &str, rho: f64, k_mc: u32, seed: u32) -> String {
    respond(orthant(pattern, rho, k_mc, seed))
}

fn orthant(pattern: &str, rho: f64, k_mc: u32, seed: u32) -> Result<serde_json::Value, String> {
    let bits: Vec<u8> = pattern
        .trim()
        .chars()
        .map(|ch| match ch {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(format!("pattern may only contain 0 and 1, found {ch:?}")),
        })
        .collect::<Result<_, _>>()?;
    let m = bits.len();
    if m == 0 || m > MAX_DIM {
        return Err(format!("pattern length must be in 1..={MAX_DIM}"));
    }
    let lower = if m > 1 { -1.0 / (m as f64 - 1.0) } else { -1.0 };
    if !(rho > lower && rho < 1.0) {
        return Err(format!(
            "correlation must lie in ({lower:.3}, 1) for {m} dimensions"
        ));
    }
    let k_mc = check_k_mc(k_mc)?;
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { rho }).collect())
        .collect();
    let row_refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let p = MvnParams::from_slices(&vec![0.0; m], &row_refs).map_err(|e| e.to_string())?;
    let pat = BinaryPattern::new(bits).map_err(|e| e.to_string())?;
    let s = seed as u64;
    let product = orthant_prob_mc(
        &p,
        &pat,
        k_mc,
        seed::derive(s, "product"),
        TailMode::ProductCdf,
    )
    .map_err(|e| e.to_string())?;
    let nested = orthant_prob_mc(
        &p,
        &pat,
        k_mc,
        seed::derive(s, "nested"),
        TailMode::NestedMc,
    )
    .map_err(|e| e.to_string())?;
    let exact = if m <= MAX_EXACT_DIM {
        Some(orthant_prob_exact_small(&p, &pat).map_err(|e| e.to_string())?)
    } else {
        None
    };
    Ok(json!({
        "pattern": pattern.trim(),
        "rho": rho,
        "exact": exact,
        "product_cdf": estimate_json(&product),
        "nested_mc": estimate_json(&nested),
    }))
}

fn demo_generator(k_states: usize, timesteps: usize, stay: f64) -> GeneratorConfig {
    GeneratorConfig {
        k_states,
        timesteps,
        block_size: 2,
        electives: 2,
        track_mean: 3.0,
        elective_corr: 0.5,
        stay,
    }
}

fn check_stay(stay: f64) -> Result<(), String> {
    if !(0.0..=1.0).contains(&stay) {
        return Err("stay probability must be in [0, 1]".into());
    }
    Ok(())
}

/// Samples `n` students from a four-timestep generator with `k_states`
/// tracks and returns the expected state-transition flows as Sankey JSON.
#[wasm_bindgen]
pub fn sankey_demo(k_states: u32, stay: f64, n: u32, seed: u32) -> String {
    respond(sankey(k_states, stay, n, seed))
}

fn sankey(k_states: u32, stay: f64, n: u32, seed: u32) -> Result<SankeyExport, String> {
    if !(2..=5).contains(&k_states) {
        return Err("state count must be in 2..=5".into());
    }
    if n == 0 || n > MAX_STUDENTS {
        return Err(format!("student count must be in 1..={MAX_STUDENTS}"));
    }
    check_stay(stay)?;
    let k = k_states as usize;
    let p = demo_generator(k, 4, stay)
        .build()
        .map_err(|e| e.to_string())?;
    let c = sample_students(&p, n as usize, seed as u64).map_err(|e| e.to_string())?;
    let flows = transition_flows(&p, &c).map_err(|e| e.to_string())?;
    Ok(SankeyExport::from_flows(&flows, k))
}

/// Layout of the inference demo model: three states, three timesteps.
#[wasm_bindgen]
pub fn infer_demo_layout() -> String {
    respond(demo_model(0.65).map(|p| {
        json!({
            "timesteps": p.timesteps,
            "n_courses": p.n_courses,
            "k_states": p.k_states,
            "course_marginals": p.course_marginals(),
        })
    }))
}

fn demo_model(stay: f64) -> Result<CmmParams, String> {
    check_stay(stay)?;
    demo_generator(3, 3, stay)
        .build()
        .map_err(|e| e.to_string())
}

/// Predicted enrollment probabilities at `query_t` given partial evidence.
///
/// `cells` has one character per `(timestep, course)` cell in row-major
/// order: `1` enrolled, `0` not enrolled, `?` unknown. Courses observed at
/// the query timestep are conditioned on and reported as `null`.
#[wasm_bindgen]
pub fn infer_demo(cells: &str, query_t: u32, stay: f64, k_mc: u32, seed: u32) -> String {
    respond(infer(cells, query_t, stay, k_mc, seed))
}

fn infer(
    cells: &str,
    query_t: u32,
    stay: f64,
    k_mc: u32,
    seed: u32,
) -> Result<serde_json::Value, String> {
    let p = demo_model(stay)?;
    let (t_count, m) = (p.timesteps, p.n_courses);
    let chars: Vec<char> = cells.trim().chars().collect();
    if chars.len() != t_count * m {
        return Err(format!(
            "expected {} cells, found {}",
            t_count * m,
            chars.len()
        ));
    }
    let q = query_t as usize;
    if q >= t_count {
        return Err(format!("query timestep must be below {t_count}"));
    }
    let k_mc = check_k_mc(k_mc)?;
    let mut steps = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut known = BTreeMap::new();
        for j in 0..m {
            match chars[t * m + j] {
                '1' => {
                    known.insert(j, 1u8);
                }
                '0' => {
                    known.insert(j, 0u8);
                }
                '?' => {}
                ch => return Err(format!("cells may only contain 0, 1 and ?, found {ch:?}")),
            }
        }
        steps.push(if known.is_empty() {
            TimestepObservation::Unobserved
        } else {
            TimestepObservation::Partial(known)
        });
    }
    let open: Vec<usize> = (0..m).filter(|&j| chars[q * m + j] == '?').collect();
    let mask = ObservationMask { steps };
    let est = if open.is_empty() {
        Vec::new()
    } else {
        infer_intermediate_with(&p, &mask, q, &open, k_mc, seed as u64, TailMode::NestedMc)
            .map_err(|e| e.to_string())?
    };
    let mut probability = vec![None; m];
    let mut std_error = vec![None; m];
    for (&j, e) in open.iter().zip(&est) {
        probability[j] = Some(e.value);
        std_error[j] = Some(e.std_error);
    }
    Ok(json!({
        "query_t": q,
        "probability": probability,
        "std_error": std_error,
        "prior": p.course_marginals()[q],
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn orthant_demo_matches_arcsine_identity() {
        let v = parse(&orthant_demo("11", 0.5, 20_000, 3));
        let exact = v["exact"].as_f64().unwrap();
        assert!((exact - 1.0 / 3.0).abs() < 1e-6);
        let est = &v["nested_mc"];
        let (val, se) = (
            est["value"].as_f64().unwrap(),
            est["std_error"].as_f64().unwrap(),
        );
        assert!((val - exact).abs() < 4.0 * se);
        assert!(parse(&orthant_demo("111111", 0.2, 1000, 1))["exact"].is_null());
    }

    #[test]
    fn bad_inputs_are_reported_as_errors() {
        for s in [
            orthant_demo("12", 0.5, 100, 0),
            orthant_demo("111", -0.6, 100, 0),
            orthant_demo("1", 0.0, 0, 0),
            sankey_demo(1, 0.5, 10, 0),
            infer_demo("??", 1, 0.5, 100, 0),
        ] {
            assert!(parse(&s)["error"].is_string(), "{s}");
        }
    }

    #[test]
    fn sankey_flows_conserve_students() {
        let v = parse(&sankey_demo(3, 0.8, 500, 7));
        let links = v["links"].as_array().unwrap();
        assert_eq!(links.len(), 3 * 3 * 3);
        let total: f64 = links.iter().map(|l| l["value"].as_f64().unwrap()).sum();
        // Three transitions, each carrying every student once.
        assert!((total - 1500.0).abs() < 1e-6);
    }

    #[test]
    fn infer_demo_uses_neighbouring_evidence() {
        let layout = parse(&infer_demo_layout());
        let (t, m) = (
            layout["timesteps"].as_u64().unwrap() as usize,
            layout["n_courses"].as_u64().unwrap() as usize,
        );
        // Block 0 taken at t = 0 identifies state 0. The demo generator
        // rotates each state's block by one per timestep, so a persistent
        // state 0 takes block 1 (courses 2 and 3) at t = 1.
        let mut cells = vec!['?'; t * m];
        for j in 0..m {
            cells[j] = if j < 2 { '1' } else { '0' };
        }
        let s: String = cells.iter().collect();
        let v = parse(&infer_demo(&s, 1, 0.9, 2000, 1));
        let p = v["probability"].as_array().unwrap();
        assert!(p[2].as_f64().unwrap() > 0.8, "{v}");
        assert!(p[0].as_f64().unwrap() < 0.2, "{v}");
        let none = parse(&infer_demo(&"?".repeat(t * m), 1, 0.9, 200, 1));
        let prior = none["prior"].as_array().unwrap();
        for (a, b) in none["probability"].as_array().unwrap().iter().zip(prior) {
            assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-12);
        }
    }
}
