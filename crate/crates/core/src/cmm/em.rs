use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{forward_backward, pm1_loglik_matrix, CmmParams, Posterior};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::gaussian::{regularize_cov, MvnFactor, MvnParams, DEFAULT_REGULARIZATION};
use crate::{par, seed};

/// Training settings for [`em_fit_pm1`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k_states: usize,
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which a restart stops.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub regularization: f64,
}

impl EmConfig {
    pub fn new(k_states: usize, seed: u64) -> Self {
        Self {
            k_states,
            max_iters: 200,
            tol: 1e-6,
            restarts: 5,
            seed,
            regularization: DEFAULT_REGULARIZATION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmEvent {
    pub restart: usize,
    pub iteration: usize,
    pub timestep: usize,
    pub state: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: CmmParams,
    /// Log-likelihood trace of the returned restart.
    pub trace: Vec<f64>,
    pub best_restart: usize,
    pub restart_traces: Vec<Vec<f64>>,
    pub events: Vec<EmEvent>,
}

impl EmFit {
    pub fn final_loglik(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

const DEGENERATE_WEIGHT: f64 = 1e-8;

/// Maximum k-means iterations per timestep when initializing.
const LLOYD_ITERS: usize = 25;

/// Independent k-means runs per timestep; the lowest-SSE partition wins.
const KMEANS_TRIALS: usize = 8;

/// EM on the `{-1,+1}` relaxation with exact Gaussian emission
/// likelihoods. Returns the restart with the highest final log-likelihood.
pub fn em_fit_pm1(c: &Cohort, cfg: &EmConfig) -> Result<EmFit> {
    let k = cfg.k_states;
    if k == 0 {
        return Err(Error::invalid("k_states must be at least 1"));
    }
    if c.n_students() < k {
        return Err(Error::invalid(format!(
            "{} students cannot support {k} states",
            c.n_students()
        )));
    }
    if !(cfg.tol > 0.0) || !(cfg.regularization > 0.0) {
        return Err(Error::invalid(
            "tolerance and regularization must be positive",
        ));
    }
    let restarts = cfg.restarts.max(1);
    let mut best: Option<(f64, usize, CmmParams)> = None;
    let mut traces = Vec::with_capacity(restarts);
    let mut events = Vec::new();
    for r in 0..restarts {
        let rseed = seed::derive_indexed(cfg.seed, "em-restart", r as u64);
        let (params, trace) = run_restart(c, cfg, r, rseed, &mut events)?;
        let ll = *trace.last().expect("non-empty");
        log::info!("restart {r}: {} iterations, loglik {ll:.6}", trace.len());
        if best.as_ref().is_none_or(|(b, _, _)| ll > *b) {
            best = Some((ll, r, params));
        }
        traces.push(trace);
    }
    let (_, best_restart, params) = best.expect("at least one restart");
    Ok(EmFit {
        params,
        trace: traces[best_restart].clone(),
        best_restart,
        restart_traces: traces,
        events,
    })
}

fn run_restart(
    c: &Cohort,
    cfg: &EmConfig,
    restart: usize,
    rseed: u64,
    events: &mut Vec<EmEvent>,
) -> Result<(CmmParams, Vec<f64>)> {
    let mut rng = seed::rng(rseed);
    let init = initial_posteriors(c, cfg.k_states, &mut rng);
    let mut params = m_step(c, &init, cfg, &mut rng, restart, 0, events)?;
    let mut trace = Vec::new();
    for iter in 0..cfg.max_iters {
        let (posts, ll) = e_step(c, &params)?;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ll < prev - 1e-7 * prev.abs() {
                log::warn!("restart {restart} iteration {iter}: loglik fell {prev} -> {ll}");
            }
            trace.push(ll);
            if (ll - prev) < cfg.tol * prev.abs() {
                return Ok((params, trace));
            }
        } else {
            trace.push(ll);
        }
        params = m_step(c, &posts, cfg, &mut rng, restart, iter + 1, events)?;
    }
    let (_, ll) = e_step(c, &params)?;
    trace.push(ll);
    Ok((params, trace))
}

fn e_step(c: &Cohort, params: &CmmParams) -> Result<(Vec<Posterior>, f64)> {
    let factors = params.factors()?;
    let m = c.n_courses();
    let posts = par::map_indexed(c.n_students(), |i| {
        forward_backward(params, &pm1_loglik_matrix(&factors, c.student(i), m))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ll = posts.iter().map(|p| p.loglik).sum();
    Ok((posts, ll))
}

/// Seeded hard assignments: at each timestep the best of several k-means
/// runs (squared-distance seeding, then Lloyd iterations on the `{-1,+1}`
/// vectors) by within-cluster sum of squares. Transitions start from
/// independent pairings.
fn initial_posteriors<R: Rng>(c: &Cohort, k: usize, rng: &mut R) -> Vec<Posterior> {
    let (n, t_count) = (c.n_students(), c.timesteps());
    let mut labels = vec![vec![0usize; t_count]; n];
    for t in 0..t_count {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for _ in 0..KMEANS_TRIALS {
            let (sse, assign) = kmeans_timestep(c, t, k, rng);
            if best.as_ref().is_none_or(|(b, _)| sse < *b) {
                best = Some((sse, assign));
            }
        }
        let (_, assign) = best.expect("at least one k-means trial");
        for (lab, &a) in labels.iter_mut().zip(&assign) {
            lab[t] = a;
        }
    }
    labels
        .into_iter()
        .map(|lab| {
            let mut gamma = vec![0.0; t_count * k];
            for (t, &l) in lab.iter().enumerate() {
                gamma[t * k + l] = 1.0;
            }
            let mut xi = vec![0.0; t_count.saturating_sub(1) * k * k];
            for t in 0..t_count.saturating_sub(1) {
                xi[(t * k + lab[t]) * k + lab[t + 1]] = 1.0;
            }
            Posterior {
                k_states: k,
                gamma,
                xi,
                loglik: 0.0,
            }
        })
        .collect()
}

/// Closed-form updates: initial distribution, transitions from pairwise
/// posteriors, responsibility-weighted means and covariances (plus
/// `regularization * I`).
fn m_step<R: Rng>(
    c: &Cohort,
    posts: &[Posterior],
    cfg: &EmConfig,
    rng: &mut R,
    restart: usize,
    iteration: usize,
    events: &mut Vec<EmEvent>,
) -> Result<CmmParams> {
    let (n, t_count, m, k) = (c.n_students(), c.timesteps(), c.n_courses(), cfg.k_states);

    let mut theta = vec![0.0; k];
    for p in posts {
        for (th, g) in theta.iter_mut().zip(p.gamma_row(0)) {
            *th += g;
        }
    }
    let tsum: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|v| *v /= tsum);

    let mut transitions = Vec::with_capacity(t_count.saturating_sub(1));
    for t in 0..t_count.saturating_sub(1) {
        let mut counts = vec![vec![0.0; k]; k];
        for p in posts {
            for (k1, row) in counts.iter_mut().enumerate() {
                for (k2, v) in row.iter_mut().enumerate() {
                    *v += p.xi_at(t, k1, k2);
                }
            }
        }
        for row in counts.iter_mut() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
            }
        }
        transitions.push(counts);
    }

    let mut emissions = Vec::with_capacity(t_count);
    let mut xbar = vec![0.0; m];
    for t in 0..t_count {
        let mut row = Vec::with_capacity(k);
        for kk in 0..k {
            let mut w = 0.0;
            let mut mean = DVector::<f64>::zeros(m);
            for (i, p) in posts.iter().enumerate() {
                let g = p.gamma[t * k + kk];
                if g == 0.0 {
                    continue;
                }
                w += g;
                for (j, &b) in c.row(i, t).iter().enumerate() {
                    mean[j] += g * (2.0 * b as f64 - 1.0);
                }
            }
            if w < DEGENERATE_WEIGHT {
                let donor = rng.random_range(0..n);
                let mean = DVector::from_fn(m, |j, _| 2.0 * c.get(donor, t, j) as f64 - 1.0);
                let cov = DMatrix::identity(m, m) * (0.5 + cfg.regularization);
                let msg = format!("state weight {w:.3e}; re-seeded from student {donor}");
                log::warn!("restart {restart} iteration {iteration} t={t} k={kk}: {msg}");
                events.push(EmEvent {
                    restart,
                    iteration,
                    timestep: t,
                    state: kk,
                    message: msg,
                });
                row.push(MvnParams { mean, cov });
                continue;
            }
            mean /= w;
            let mut scatter = DMatrix::<f64>::zeros(m, m);
            for (i, p) in posts.iter().enumerate() {
                let g = p.gamma[t * k + kk];
                if g == 0.0 {
                    continue;
                }
                for (j, &b) in c.row(i, t).iter().enumerate() {
                    xbar[j] = 2.0 * b as f64 - 1.0 - mean[j];
                }
                for a in 0..m {
                    let ga = g * xbar[a];
                    for b in 0..=a {
                        scatter[(a, b)] += ga * xbar[b];
                    }
                }
            }
            for a in 0..m {
                for b in 0..a {
                    scatter[(b, a)] = scatter[(a, b)];
                }
            }
            scatter /= w;
            row.push(MvnParams {
                mean,
                cov: regularize_cov(&scatter, cfg.regularization),
            });
        }
        emissions.push(row);
    }

    let params = CmmParams {
        k_states: k,
        timesteps: t_count,
        n_courses: m,
        theta,
        transitions,
        emissions,
        vocab_fingerprint: c.vocab().fingerprint(),
    };
    // Cheap sanity check that regularization kept every factorization alive.
    for row in &params.emissions {
        for e in row {
            MvnFactor::new(e)?;
        }
    }
    Ok(params)
}

/// One k-means run at timestep `t`; returns the within-cluster sum of
/// squares and the assignment.
fn kmeans_timestep<R: Rng>(c: &Cohort, t: usize, k: usize, rng: &mut R) -> (f64, Vec<usize>) {
    let n = c.n_students();
    let dist = |a: &[u8], b: &[u8]| -> f64 {
        a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 * 4.0
    };
    let mut seeds: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| dist(c.row(i, t), c.row(seeds[0], t)))
        .collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist(c.row(i, t), c.row(next, t)));
        }
    }
    let mut centers: Vec<Vec<f64>> = seeds
        .iter()
        .map(|&si| c.row(si, t).iter().map(|&b| 2.0 * b as f64 - 1.0).collect())
        .collect();
    let mut assign = vec![usize::MAX; n];
    let mut sse = 0.0;
    for _ in 0..LLOYD_ITERS {
        let mut changed = false;
        sse = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let row = c.row(i, t);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (s, ctr) in centers.iter().enumerate() {
                let d: f64 = row
                    .iter()
                    .zip(ctr)
                    .map(|(&b, &v)| (2.0 * b as f64 - 1.0 - v).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            sse += best_d;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; c.n_courses()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (acc, &b) in sums[a].iter_mut().zip(c.row(i, t)) {
                *acc += 2.0 * b as f64 - 1.0;
            }
        }
        for (s, ctr) in centers.iter_mut().enumerate() {
            if counts[s] > 0 {
                for (v, acc) in ctr.iter_mut().zip(&sums[s]) {
                    *v = acc / counts[s] as f64;
                }
            }
        }
    }
    (sse, assign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{shift_to_pm1, CourseVocabulary};

    #[test]
    fn single_state_single_timestep_is_weighted_mle() {
        let vocab = CourseVocabulary::synthetic(3);
        let data = vec![1, 0, 1, 1, 1, 0, 0, 0, 1, 1, 0, 1];
        let c = Cohort::from_rows(vocab, 1, data).unwrap();
        let fit = em_fit_pm1(
            &c,
            &EmConfig {
                restarts: 1,
                ..EmConfig::new(1, 3)
            },
        )
        .unwrap();
        let rel = shift_to_pm1(&c);
        let n = 4.0;
        let e = &fit.params.emissions[0][0];
        for j in 0..3 {
            let mu: f64 = (0..4).map(|i| rel.row(i, 0)[j]).sum::<f64>() / n;
            assert!((e.mean[j] - mu).abs() < 1e-14);
            for l in 0..3 {
                let mul: f64 = (0..4).map(|i| rel.row(i, 0)[l]).sum::<f64>() / n;
                let s: f64 = (0..4)
                    .map(|i| (rel.row(i, 0)[j] - mu) * (rel.row(i, 0)[l] - mul))
                    .sum::<f64>()
                    / n;
                let want = s + if j == l { DEFAULT_REGULARIZATION } else { 0.0 };
                assert!((e.cov[(j, l)] - want).abs() < 1e-14);
            }
        }
        assert_eq!(fit.params.theta, vec![1.0]);
    }

    #[test]
    fn rejects_more_states_than_students() {
        let c = Cohort::from_rows(CourseVocabulary::synthetic(2), 1, vec![1, 0, 0, 1]).unwrap();
        assert!(em_fit_pm1(&c, &EmConfig::new(3, 0)).is_err());
    }

    #[test]
    fn trace_is_monotone_on_sampled_cohort() {
        let p = super::super::tests_support_saturated(3, 4, 0.8);
        let mut p = p;
        for row in &mut p.emissions {
            for e in row {
                e.mean.iter_mut().for_each(|v| *v *= 0.1);
            }
        }
        let c = crate::cmm::sample_students(&p, 300, 5).unwrap();
        let fit = em_fit_pm1(
            &c,
            &EmConfig {
                restarts: 2,
                max_iters: 60,
                ..EmConfig::new(2, 1)
            },
        )
        .unwrap();
        for tr in &fit.restart_traces {
            for w in tr.windows(2) {
                assert!(w[1] >= w[0] - 1e-7 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
        }
        let best = fit
            .restart_traces
            .iter()
            .map(|t| *t.last().unwrap())
            .fold(f64::MIN, f64::max);
        assert_eq!(fit.final_loglik(), best);
    }
}
