use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{forward_backward, pm1_loglik_matrix, viterbi, CmmParams, Posterior};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::gaussian::{normal_cdf, orthant_prob_mc, BinaryPattern, ProbEstimate, TailMode};
use crate::{par, seed};

/// Log-likelihood with a Monte-Carlo standard error (zero when exact).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEstimate {
    pub value: f64,
    pub std_error: f64,
    pub sample_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    /// Gaussian density of the `{-1,+1}` vector.
    Pm1Exact,
    /// Orthant probability of the binary pattern, estimated by Monte Carlo.
    BinaryMc,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepObservation {
    Unobserved,
    /// Known enrollments `(course index, 0/1)`; other courses are unknown.
    Partial(BTreeMap<usize, u8>),
}

/// What is known about one student at every timestep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    pub steps: Vec<TimestepObservation>,
}

impl ObservationMask {
    pub fn unobserved(timesteps: usize) -> Self {
        Self {
            steps: vec![TimestepObservation::Unobserved; timesteps],
        }
    }

    /// Full observation of `record` (`T * M` bits) at the listed timesteps.
    pub fn from_record(record: &[u8], m: usize, observed: &[usize]) -> Self {
        let t_count = record.len() / m.max(1);
        let mut mask = Self::unobserved(t_count);
        for &t in observed {
            let row = &record[t * m..(t + 1) * m];
            mask.steps[t] = TimestepObservation::Partial(row.iter().copied().enumerate().collect());
        }
        mask
    }

    fn validate(&self, p: &CmmParams) -> Result<()> {
        if self.steps.len() != p.timesteps {
            return Err(Error::shape(format!(
                "mask covers {} timesteps, model has {}",
                self.steps.len(),
                p.timesteps
            )));
        }
        for step in &self.steps {
            if let TimestepObservation::Partial(a) = step {
                if let Some((&j, &v)) = a.iter().find(|(&j, &v)| j >= p.n_courses || v > 1) {
                    return Err(Error::invalid(format!("bad assignment course {j} = {v}")));
                }
            }
        }
        Ok(())
    }
}

fn pattern_log_evidence(
    p: &CmmParams,
    t: usize,
    k: usize,
    assign: &BTreeMap<usize, u8>,
    k_mc: usize,
    seed: u64,
    tail: TailMode,
) -> Result<(f64, f64)> {
    if assign.is_empty() {
        return Ok((0.0, 0.0));
    }
    let idx: Vec<usize> = assign.keys().copied().collect();
    let bits: Vec<u8> = assign.values().copied().collect();
    let marg = p.emissions[t][k].marginal(&idx)?;
    let est = orthant_prob_mc(&marg, &BinaryPattern::new(bits)?, k_mc, seed, tail)?;
    Ok(log_with_rel_se(&est))
}

fn log_with_rel_se(est: &ProbEstimate) -> (f64, f64) {
    if est.value > 0.0 {
        (est.value.ln(), est.std_error / est.value)
    } else {
        (f64::NEG_INFINITY, 0.0)
    }
}

/// Log-likelihood of one student's `T * M` record.
///
/// In `BinaryMc` mode each `(t, k)` cell is the orthant probability of the
/// timestep's binary pattern; the standard error is propagated through the
/// forward recursion by the delta method (`d loglik / d log cell = gamma`).
pub fn student_loglik(
    p: &CmmParams,
    student: &[u8],
    mode: LikelihoodMode,
    k_mc: usize,
    seed: u64,
) -> Result<LogEstimate> {
    let (t_count, k, m) = (p.timesteps, p.k_states, p.n_courses);
    if student.len() != t_count * m {
        return Err(Error::shape(format!(
            "record has {} entries, expected {}",
            student.len(),
            t_count * m
        )));
    }
    match mode {
        LikelihoodMode::Pm1Exact => {
            let post = forward_backward(p, &pm1_loglik_matrix(&p.factors()?, student, m))?;
            Ok(LogEstimate {
                value: post.loglik,
                std_error: 0.0,
                sample_count: 0,
            })
        }
        LikelihoodMode::BinaryMc => {
            let mut like = vec![0.0; t_count * k];
            let mut rel = vec![0.0; t_count * k];
            for t in 0..t_count {
                let pattern = BinaryPattern::new(student[t * m..(t + 1) * m].to_vec())?;
                for kk in 0..k {
                    let s = seed::derive_indexed(seed, "loglik-cell", (t * k + kk) as u64);
                    let est = orthant_prob_mc(
                        &p.emissions[t][kk],
                        &pattern,
                        k_mc,
                        s,
                        TailMode::NestedMc,
                    )?;
                    let (l, r) = log_with_rel_se(&est);
                    like[t * k + kk] = l;
                    rel[t * k + kk] = r;
                }
            }
            let post = forward_backward(p, &like)?;
            let var: f64 = post
                .gamma
                .iter()
                .zip(&rel)
                .map(|(g, r)| (g * r).powi(2))
                .sum();
            Ok(LogEstimate {
                value: post.loglik,
                std_error: var.sqrt(),
                sample_count: k_mc,
            })
        }
    }
}

/// Posteriors of every student under `{-1,+1}` likelihoods.
pub fn posteriors(p: &CmmParams, c: &Cohort) -> Result<Vec<Posterior>> {
    p.check_cohort(c)?;
    let factors = p.factors()?;
    let m = p.n_courses;
    par::map_indexed(c.n_students(), |i| {
        forward_backward(p, &pm1_loglik_matrix(&factors, c.student(i), m))
    })
    .into_iter()
    .collect()
}

/// [`infer_intermediate_with`] using the unbiased nested estimator.
pub fn infer_intermediate(
    p: &CmmParams,
    mask: &ObservationMask,
    query_t: usize,
    query_courses: &[usize],
    k_mc: usize,
    seed: u64,
) -> Result<Vec<ProbEstimate>> {
    infer_intermediate_with(
        p,
        mask,
        query_t,
        query_courses,
        k_mc,
        seed,
        TailMode::NestedMc,
    )
}

/// Probability that each query course is taken at `query_t` given the
/// evidence in `mask`.
///
/// Evidence at each `(t, k)` is the orthant probability of the partial
/// assignment with unmentioned courses marginalized out. Forward-backward
/// gives the state posterior at `query_t`, and the answer for course `j` is
/// `sum_k gamma_k * P(x_j = 1 | h = k, evidence at query_t)`. With no
/// evidence at `query_t` that conditional is `Phi(mu_kj / sigma_kj)`;
/// otherwise it is a ratio of orthant estimates sharing one seed.
///
/// The standard error combines the Monte-Carlo error of every evidence
/// cell through numerically differentiated forward-backward sensitivities.
pub fn infer_intermediate_with(
    p: &CmmParams,
    mask: &ObservationMask,
    query_t: usize,
    query_courses: &[usize],
    k_mc: usize,
    seed: u64,
    tail: TailMode,
) -> Result<Vec<ProbEstimate>> {
    mask.validate(p)?;
    let (t_count, k, m) = (p.timesteps, p.k_states, p.n_courses);
    if query_t >= t_count {
        return Err(Error::invalid(format!(
            "query timestep {query_t} out of range"
        )));
    }
    if k_mc == 0 {
        return Err(Error::invalid("Monte-Carlo sample count must be positive"));
    }
    let query_assign = match &mask.steps[query_t] {
        TimestepObservation::Unobserved => None,
        TimestepObservation::Partial(a) => Some(a),
    };
    for &j in query_courses {
        if j >= m {
            return Err(Error::invalid(format!("query course {j} out of range")));
        }
        if query_assign.is_some_and(|a| a.contains_key(&j)) {
            return Err(Error::invalid(format!(
                "course {j} is already observed at the query timestep"
            )));
        }
    }

    let mut log_ev = vec![0.0; t_count * k];
    let mut rel_se = vec![0.0; t_count * k];
    for (t, step) in mask.steps.iter().enumerate() {
        if let TimestepObservation::Partial(a) = step {
            for kk in 0..k {
                let s = seed::derive_indexed(seed, "evidence", (t * k + kk) as u64);
                let (l, r) = pattern_log_evidence(p, t, kk, a, k_mc, s, tail)?;
                log_ev[t * k + kk] = l;
                rel_se[t * k + kk] = r;
            }
            // A Monte-Carlo estimate of zero under every state says nothing
            // about which state is more likely: treat the timestep as
            // uninformative instead of as impossible.
            let row = &mut log_ev[t * k..(t + 1) * k];
            if row.iter().all(|&v| v == f64::NEG_INFINITY) {
                log::debug!("evidence at timestep {t} underflowed for every state; ignoring it");
                row.fill(0.0);
            }
        }
    }

    // Per-state conditional take probability at query_t, with its SE.
    let mut cond = vec![vec![(0.0, 0.0); k]; query_courses.len()];
    for (qi, &j) in query_courses.iter().enumerate() {
        for kk in 0..k {
            let e = &p.emissions[query_t][kk];
            cond[qi][kk] = match query_assign {
                Some(a) if !a.is_empty() => {
                    let mut with = a.clone();
                    with.insert(j, 1);
                    let s = seed::derive_indexed(seed, "evidence", (query_t * k + kk) as u64);
                    let (num, num_rel) =
                        pattern_log_evidence(p, query_t, kk, &with, k_mc, s, tail)?;
                    let den = log_ev[query_t * k + kk];
                    if den == f64::NEG_INFINITY {
                        (0.0, 0.0)
                    } else {
                        let v = (num - den).exp().clamp(0.0, 1.0);
                        (v, v * num_rel)
                    }
                }
                _ => (normal_cdf(e.mean[j] / e.sd(j)), 0.0),
            };
        }
    }

    let answer = |ev: &[f64]| -> Result<Vec<f64>> {
        let post = forward_backward(p, ev)?;
        let g = post.gamma_row(query_t);
        Ok(cond
            .iter()
            .map(|row| row.iter().zip(g).map(|((c, _), w)| c * w).sum::<f64>())
            .collect())
    };
    let base = answer(&log_ev)?;
    let gamma = forward_backward(p, &log_ev)?.gamma_row(query_t).to_vec();

    let mut var = vec![0.0; query_courses.len()];
    const H: f64 = 1e-5;
    for cell in 0..t_count * k {
        if rel_se[cell] == 0.0 || !log_ev[cell].is_finite() {
            continue;
        }
        let mut up = log_ev.clone();
        let mut down = log_ev.clone();
        up[cell] += H;
        down[cell] -= H;
        let (a, b) = (answer(&up)?, answer(&down)?);
        for q in 0..var.len() {
            let d = (a[q] - b[q]) / (2.0 * H);
            var[q] += (d * rel_se[cell]).powi(2);
        }
    }
    for (q, row) in cond.iter().enumerate() {
        for (kk, (_, se)) in row.iter().enumerate() {
            var[q] += (gamma[kk] * se).powi(2);
        }
    }

    Ok(base
        .into_iter()
        .zip(var)
        .map(|(v, var)| ProbEstimate {
            value: v.clamp(0.0, 1.0),
            std_error: var.sqrt(),
            sample_count: k_mc,
        })
        .collect())
}

/// Most probable hidden path under `{-1,+1}` likelihoods.
pub fn decode_path(p: &CmmParams, student: &[u8]) -> Result<Vec<usize>> {
    if student.len() != p.timesteps * p.n_courses {
        return Err(Error::shape("record does not match model"));
    }
    viterbi(p, &pm1_loglik_matrix(&p.factors()?, student, p.n_courses))
}

/// Expected transition counts `flows[t][k][k']` summed over the cohort.
pub fn transition_flows(p: &CmmParams, c: &Cohort) -> Result<Vec<Vec<Vec<f64>>>> {
    let posts = posteriors(p, c)?;
    let k = p.k_states;
    let mut flows = vec![vec![vec![0.0; k]; k]; p.timesteps.saturating_sub(1)];
    for post in &posts {
        for (t, f) in flows.iter_mut().enumerate() {
            for (k1, row) in f.iter_mut().enumerate() {
                for (k2, v) in row.iter_mut().enumerate() {
                    *v += post.xi_at(t, k1, k2);
                }
            }
        }
    }
    Ok(flows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SankeyNode {
    pub id: String,
    pub timestep: usize,
    pub state: usize,
    /// Expected number of students in this state.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: String,
    pub target: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SankeyExport {
    pub schema_version: u32,
    pub nodes: Vec<SankeyNode>,
    pub links: Vec<SankeyLink>,
}

impl SankeyExport {
    /// Nodes `t{t}_k{k}` and one link per adjacent-timestep state pair.
    pub fn from_flows(flows: &[Vec<Vec<f64>>], k: usize) -> Self {
        let node = |t: usize, kk: usize| format!("t{t}_k{kk}");
        let t_count = flows.len() + 1;
        let mut nodes = Vec::with_capacity(t_count * k);
        for t in 0..t_count {
            for kk in 0..k {
                let value = if t < flows.len() {
                    flows[t][kk].iter().sum()
                } else {
                    flows[t - 1].iter().map(|row| row[kk]).sum()
                };
                nodes.push(SankeyNode {
                    id: node(t, kk),
                    timestep: t,
                    state: kk,
                    value,
                });
            }
        }
        let mut links = Vec::new();
        for (t, f) in flows.iter().enumerate() {
            for (k1, row) in f.iter().enumerate() {
                for (k2, &v) in row.iter().enumerate() {
                    links.push(SankeyLink {
                        source: node(t, k1),
                        target: node(t + 1, k2),
                        value: v,
                    });
                }
            }
        }
        Self {
            schema_version: 1,
            nodes,
            links,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests_support_saturated as saturated_two_state;
    use super::*;
    use crate::data::CourseVocabulary;
    use crate::gaussian::{logpdf, MvnParams};
    use nalgebra::DMatrix;

    #[test]
    fn pm1_single_state_equals_logpdf() {
        let vocab = CourseVocabulary::synthetic(3);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 0.8, 0.0, 0.1, 0.0, 1.3]);
        let p = CmmParams::from_parts(
            vec![1.0],
            vec![],
            vec![vec![vec![0.3, -0.2, 0.5]]],
            vec![vec![cov.clone()]],
            &vocab,
        )
        .unwrap();
        let got = student_loglik(&p, &[1, 0, 1], LikelihoodMode::Pm1Exact, 0, 0).unwrap();
        let want = logpdf(
            &[1.0, -1.0, 1.0],
            &MvnParams::new(p.emissions[0][0].mean.clone(), cov).unwrap(),
        )
        .unwrap();
        assert!((got.value - want).abs() < 1e-12);
    }

    #[test]
    fn binary_mc_diagonal_is_product_of_cdfs() {
        let vocab = CourseVocabulary::synthetic(3);
        let mu = vec![0.4, -0.3, 0.1];
        let var = [1.0, 0.5, 2.0];
        let p = CmmParams::from_parts(
            vec![1.0],
            vec![],
            vec![vec![mu.clone()]],
            vec![vec![DMatrix::from_diagonal(
                &nalgebra::DVector::from_row_slice(&var),
            )]],
            &vocab,
        )
        .unwrap();
        let bits = [1u8, 0, 1];
        let want: f64 = (0..3)
            .map(|j| {
                let z = mu[j] / var[j].sqrt();
                normal_cdf(if bits[j] == 1 { z } else { -z }).ln()
            })
            .sum();
        let got = student_loglik(&p, &bits, LikelihoodMode::BinaryMc, 100_000, 8).unwrap();
        assert!(
            (got.value - want).abs() <= 3.0 * got.std_error,
            "{got:?} vs {want}"
        );
    }

    #[test]
    fn empty_mask_returns_prior_marginal() {
        let p = saturated_two_state(3, 4, 0.8);
        let mask = ObservationMask::unobserved(3);
        let got = infer_intermediate(&p, &mask, 1, &[0, 3], 100, 1).unwrap();
        let marg = p.course_marginals();
        assert!((got[0].value - marg[1][0]).abs() < 1e-12);
        assert!((got[1].value - marg[1][3]).abs() < 1e-12);
    }

    #[test]
    fn coupled_model_propagates_evidence() {
        let p = saturated_two_state(3, 4, 0.98);
        // Student in state 1 at t=0: courses 2,3 taken.
        let record = [0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let mask = ObservationMask::from_record(&record, 4, &[0]);
        let got = infer_intermediate(&p, &mask, 1, &[0, 2], 2000, 3).unwrap();
        assert!(got[1].value > 0.95, "{got:?}");
        assert!(got[0].value < 0.05, "{got:?}");
    }

    #[test]
    fn single_state_ignores_mask() {
        let vocab = CourseVocabulary::synthetic(2);
        let p = CmmParams::from_parts(
            vec![1.0],
            vec![vec![vec![1.0]]],
            vec![vec![vec![0.5, -0.5]]; 2],
            vec![vec![DMatrix::identity(2, 2)]; 2],
            &vocab,
        )
        .unwrap();
        let a = infer_intermediate(&p, &ObservationMask::unobserved(2), 1, &[0], 500, 1).unwrap();
        let mask = ObservationMask::from_record(&[1, 1, 0, 0], 2, &[0]);
        let b = infer_intermediate(&p, &mask, 1, &[0], 500, 1).unwrap();
        assert!((a[0].value - b[0].value).abs() < 1e-12);
    }

    #[test]
    fn observed_query_course_is_an_error() {
        let p = saturated_two_state(2, 2, 0.9);
        let mask = ObservationMask::from_record(&[1, 0, 0, 1], 2, &[0, 1]);
        assert!(infer_intermediate(&p, &mask, 1, &[0], 10, 0).is_err());
    }

    #[test]
    fn decode_saturated_paths() {
        let p = saturated_two_state(3, 4, 0.9);
        assert_eq!(
            decode_path(&p, &[0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1]).unwrap(),
            vec![1, 1, 1]
        );
        assert_eq!(
            decode_path(&p, &[1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0]).unwrap(),
            vec![0, 1, 0]
        );
    }

    #[test]
    fn flows_normalize_to_cohort_size() {
        let p = saturated_two_state(4, 4, 0.7);
        let vocab = CourseVocabulary::synthetic(4);
        let c = crate::cmm::sample_students_with_vocab(&p, &vocab, 37, 2).unwrap();
        let flows = transition_flows(&p, &c).unwrap();
        for f in &flows {
            let s: f64 = f.iter().flatten().sum();
            assert!((s - 37.0).abs() < 1e-9);
        }
        let sankey = SankeyExport::from_flows(&flows, 2);
        assert_eq!(sankey.nodes.len(), 8);
        assert_eq!(sankey.links.len(), 12);
        assert_eq!(sankey.nodes[5].id, "t2_k1");

        let other = Cohort::from_rows(CourseVocabulary::synthetic(5), 4, vec![0; 20]).unwrap();
        assert!(matches!(
            transition_flows(&p, &other),
            Err(Error::Fingerprint { .. })
        ));
    }
}
