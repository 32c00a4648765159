//! Synthetic scenarios with known ground truth: the model-comparison
//! benchmark, a temporally coupled inference scenario, and a
//! parameter-recovery scenario, plus state alignment for recovery checks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{best_of_restarts, model_sample, nb_fit_em, tan_fit_em};
use crate::cmm::{em_fit_pm1, sample_students, CmmParams, EmConfig};
use crate::data::{split_cohort, synth_generate, Cohort, CourseVocabulary};
use crate::error::{Error, Result};
use crate::eval::{
    inference_accuracy, majority_accuracy, mean_field_error, nb_inference_accuracy, MarginalScope,
};
use crate::gaussian::normal_cdf;
use crate::seed;

/// Ground-truth generator with "track" courses organised in blocks and a
/// group of mutually correlated electives.
///
/// At timestep `t`, a student in state `k` takes block `(k + t) % blocks`
/// (mean `+track_mean`) and skips every other track course (mean
/// `-track_mean`); electives have mean 0 and pairwise correlation
/// `elective_corr` in every state. Transitions alternate between a
/// persistent matrix (stay with probability `stay`) and a rotating one
/// (move to `k + 1` with probability `stay`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub k_states: usize,
    pub timesteps: usize,
    pub block_size: usize,
    pub electives: usize,
    pub track_mean: f64,
    pub elective_corr: f64,
    pub stay: f64,
}

impl GeneratorConfig {
    pub fn n_courses(&self) -> usize {
        self.k_states * self.block_size + self.electives
    }

    pub fn build(&self) -> Result<CmmParams> {
        let (k, t_count, b) = (self.k_states, self.timesteps, self.block_size);
        if k == 0 || t_count == 0 || b == 0 {
            return Err(Error::invalid(
                "generator needs states, timesteps and courses",
            ));
        }
        if !(0.0..=1.0).contains(&self.stay) || !(0.0..1.0).contains(&self.elective_corr) {
            return Err(Error::invalid("generator probabilities out of range"));
        }
        let m = self.n_courses();
        let tracks = k * b;
        let mut cov = DMatrix::identity(m, m);
        for a in tracks..m {
            for c in tracks..m {
                if a != c {
                    cov[(a, c)] = self.elective_corr;
                }
            }
        }
        let means: Vec<Vec<Vec<f64>>> = (0..t_count)
            .map(|t| {
                (0..k)
                    .map(|kk| {
                        let block = (kk + t) % k;
                        (0..m)
                            .map(|j| match j {
                                j if j >= tracks => 0.0,
                                j if j / b == block => self.track_mean,
                                _ => -self.track_mean,
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let leak = if k > 1 {
            (1.0 - self.stay) / (k - 1) as f64
        } else {
            0.0
        };
        let transitions = (0..t_count.saturating_sub(1))
            .map(|t| {
                (0..k)
                    .map(|from| {
                        let to = if t % 2 == 0 { from } else { (from + 1) % k };
                        (0..k)
                            .map(|j| {
                                if k == 1 {
                                    1.0
                                } else if j == to {
                                    self.stay
                                } else {
                                    leak
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        CmmParams::from_parts(
            vec![1.0 / k as f64; k],
            transitions,
            means,
            vec![vec![cov; k]; t_count],
            &CourseVocabulary::synthetic(m),
        )
    }
}

/// Model-comparison benchmark: fit every model family over a grid of state
/// counts, sample from each fit, and compare mean-field errors against a
/// holdout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub generator: GeneratorConfig,
    pub n_students: usize,
    pub holdout_fraction: f64,
    pub n_samples: usize,
    pub k_grid: Vec<usize>,
    pub max_iters: usize,
    pub tol: f64,
    /// EM restarts per fit, for every model family; the highest training
    /// likelihood is kept.
    pub restarts: usize,
    /// Covariance regularization of the contextual mixture fits.
    pub regularization: f64,
    pub scope: MarginalScope,
    pub replications: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig {
                k_states: 3,
                timesteps: 4,
                block_size: 2,
                electives: 3,
                track_mean: 3.0,
                elective_corr: 0.6,
                stay: 0.0,
            },
            n_students: 30_000,
            holdout_fraction: 0.5,
            n_samples: 100_000,
            k_grid: vec![2, 3, 4],
            max_iters: 100,
            tol: 1e-6,
            restarts: 3,
            regularization: 0.05,
            scope: MarginalScope::AnyTimestep,
            replications: 5,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub k_states: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub nb: Vec<GridResult>,
    pub tan: Vec<GridResult>,
    pub cmm: Vec<GridResult>,
}

fn best(v: &[GridResult]) -> f64 {
    v.iter().map(|g| g.error).fold(f64::INFINITY, f64::min)
}

impl ReplicationResult {
    pub fn best_nb(&self) -> f64 {
        best(&self.nb)
    }
    pub fn best_tan(&self) -> f64 {
        best(&self.tan)
    }
    pub fn best_cmm(&self) -> f64 {
        best(&self.cmm)
    }
    /// Best-of-grid errors satisfy `CMM <= TAN <= NB`.
    pub fn ordering_holds(&self) -> bool {
        self.best_cmm() <= self.best_tan() && self.best_tan() <= self.best_nb()
    }
}

/// Training and holdout cohorts of one benchmark replication.
pub fn benchmark_data(
    cfg: &BenchmarkConfig,
    replication: usize,
) -> Result<(CmmParams, Cohort, Cohort)> {
    let truth = cfg.generator.build()?;
    let rseed = seed::derive_indexed(cfg.seed, "benchmark-replication", replication as u64);
    let c = sample_students(&truth, cfg.n_students, seed::derive(rseed, "cohort"))?;
    let (train, holdout) = split_cohort(&c, cfg.holdout_fraction, seed::derive(rseed, "split"))?;
    Ok((truth, train, holdout))
}

pub fn run_benchmark_replication(
    cfg: &BenchmarkConfig,
    replication: usize,
) -> Result<ReplicationResult> {
    let (_, train, holdout) = benchmark_data(cfg, replication)?;
    let rseed = seed::derive_indexed(cfg.seed, "benchmark-replication", replication as u64);
    let vocab = train.vocab().clone();
    let mut out = ReplicationResult {
        replication,
        nb: Vec::new(),
        tan: Vec::new(),
        cmm: Vec::new(),
    };
    for &k in &cfg.k_grid {
        let s = seed::derive_indexed(rseed, "benchmark-k", k as u64);
        let nb = best_of_restarts(cfg.restarts, |r| {
            nb_fit_em(
                &train,
                k,
                cfg.max_iters,
                cfg.tol,
                seed::derive_indexed(s, "nb-restart", r as u64),
            )
        })?;
        let samples = model_sample(
            &nb.params,
            &vocab,
            cfg.n_samples,
            seed::derive(s, "nb-sample"),
        )?;
        out.nb.push(GridResult {
            k_states: k,
            error: mean_field_error(&holdout, &samples, cfg.scope)?,
        });

        let tan = best_of_restarts(cfg.restarts, |r| {
            tan_fit_em(
                &train,
                k,
                cfg.max_iters,
                cfg.tol,
                seed::derive_indexed(s, "tan-restart", r as u64),
            )
        })?;
        let samples = model_sample(
            &tan.params,
            &vocab,
            cfg.n_samples,
            seed::derive(s, "tan-sample"),
        )?;
        out.tan.push(GridResult {
            k_states: k,
            error: mean_field_error(&holdout, &samples, cfg.scope)?,
        });

        let em = EmConfig {
            max_iters: cfg.max_iters,
            tol: cfg.tol,
            restarts: cfg.restarts,
            regularization: cfg.regularization,
            ..EmConfig::new(k, s)
        };
        let cmm = em_fit_pm1(&train, &em)?;
        let samples = sample_students(&cmm.params, cfg.n_samples, seed::derive(s, "cmm-sample"))?;
        out.cmm.push(GridResult {
            k_states: k,
            error: mean_field_error(&holdout, &samples, cfg.scope)?,
        });
    }
    Ok(out)
}

/// Mean-field error of samples of each size in `sizes` from a contextual
/// mixture fitted (with `k` states) on one benchmark replication's training
/// split, against that replication's holdout.
pub fn sample_size_curve(
    cfg: &BenchmarkConfig,
    replication: usize,
    k: usize,
    sizes: &[usize],
) -> Result<Vec<f64>> {
    let (_, train, holdout) = benchmark_data(cfg, replication)?;
    let rseed = seed::derive_indexed(cfg.seed, "benchmark-replication", replication as u64);
    let em = EmConfig {
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        restarts: cfg.restarts,
        regularization: cfg.regularization,
        ..EmConfig::new(k, seed::derive(rseed, "curve-fit"))
    };
    let fit = em_fit_pm1(&train, &em)?;
    sizes
        .iter()
        .map(|&n| {
            let s = sample_students(
                &fit.params,
                n,
                seed::derive_indexed(rseed, "curve-sample", n as u64),
            )?;
            mean_field_error(&holdout, &s, cfg.scope)
        })
        .collect()
}

/// Masked-timestep inference scenario: the generator with leaky
/// transitions, so that neighbouring timesteps are informative about the
/// hidden state but many distinct paths carry mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledConfig {
    pub generator: GeneratorConfig,
    pub n_students: usize,
    pub holdout_fraction: f64,
    pub query_t: usize,
    pub query_courses: Vec<usize>,
    pub threshold: f64,
    pub k_mc: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CoupledConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig {
                k_states: 3,
                timesteps: 3,
                block_size: 2,
                electives: 2,
                track_mean: 3.0,
                elective_corr: 0.5,
                stay: 0.65,
            },
            n_students: 10_000,
            holdout_fraction: 0.2,
            query_t: 1,
            query_courses: vec![0, 1, 2, 3, 4],
            threshold: 0.5,
            k_mc: 400,
            max_iters: 200,
            tol: 1e-6,
            restarts: 3,
            seed: 77,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledResult {
    pub cmm_accuracy: f64,
    pub nb_accuracy: f64,
    pub majority_accuracy: f64,
}

/// Fits a contextual mixture and a naive Bayes mixture (both with the true
/// state count) on the training split and scores masked-timestep
/// predictions on the holdout; the majority baseline uses training
/// frequencies.
pub fn run_coupled(cfg: &CoupledConfig) -> Result<CoupledResult> {
    let truth = cfg.generator.build()?;
    let k = cfg.generator.k_states;
    let c = sample_students(&truth, cfg.n_students, seed::derive(cfg.seed, "cohort"))?;
    let (train, holdout) = split_cohort(&c, cfg.holdout_fraction, seed::derive(cfg.seed, "split"))?;
    let em = EmConfig {
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        restarts: cfg.restarts,
        ..EmConfig::new(k, seed::derive(cfg.seed, "cmm-fit"))
    };
    let cmm = em_fit_pm1(&train, &em)?;
    let nb = best_of_restarts(cfg.restarts, |r| {
        nb_fit_em(
            &train,
            k,
            cfg.max_iters,
            cfg.tol,
            seed::derive_indexed(cfg.seed, "nb-restart", r as u64),
        )
    })?;
    let (q, courses) = (cfg.query_t, &cfg.query_courses);
    Ok(CoupledResult {
        cmm_accuracy: inference_accuracy(
            &cmm.params,
            &holdout,
            q,
            courses,
            cfg.threshold,
            cfg.k_mc,
            seed::derive(cfg.seed, "inference"),
        )?
        .accuracy,
        nb_accuracy: nb_inference_accuracy(&nb.params, &holdout, q, courses, cfg.threshold)?
            .accuracy,
        majority_accuracy: majority_accuracy(&train, &holdout, q, courses)?.accuracy,
    })
}

/// Parameter-recovery scenario: well separated emissions with diagonal
/// covariance and distinct transition matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub generator: GeneratorConfig,
    pub n_students: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig {
                k_states: 3,
                timesteps: 4,
                block_size: 3,
                electives: 1,
                track_mean: 2.0,
                elective_corr: 0.0,
                stay: 0.8,
            },
            n_students: 10_000,
            restarts: 5,
            max_iters: 200,
            tol: 1e-8,
            seed: 11,
        }
    }
}

/// Generates the recovery cohort from the scenario's ground truth, fits it
/// with the true state count and reports aligned errors.
pub fn run_recovery(cfg: &RecoveryConfig) -> Result<(RecoveryErrors, CmmParams)> {
    let truth = cfg.generator.build()?;
    let c = synth_generate(&truth, cfg.n_students, seed::derive(cfg.seed, "cohort"))?;
    let em = EmConfig {
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        restarts: cfg.restarts,
        ..EmConfig::new(cfg.generator.k_states, seed::derive(cfg.seed, "fit"))
    };
    let fit = em_fit_pm1(&c, &em)?;
    Ok((recovery_errors(&fit.params, &truth)?, fit.params))
}

/// Expected `{-1,+1}` value of each coordinate: `2 Phi(mu / sigma) - 1`.
pub fn pm1_expectation(p: &CmmParams, t: usize, k: usize) -> Vec<f64> {
    let e = &p.emissions[t][k];
    (0..p.n_courses)
        .map(|j| 2.0 * normal_cdf(e.mean[j] / e.sd(j)) - 1.0)
        .collect()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// For every timestep, the permutation `perm[t][true_state] = fitted_state`
/// minimising the summed squared distance between fitted emission means and
/// the truth's `{-1,+1}` expectations. States at different timesteps are
/// aligned independently because nothing ties them together.
pub fn align_states(fitted: &CmmParams, truth: &CmmParams) -> Result<Vec<Vec<usize>>> {
    if fitted.k_states != truth.k_states
        || fitted.timesteps != truth.timesteps
        || fitted.n_courses != truth.n_courses
    {
        return Err(Error::shape("models have different shapes"));
    }
    let k = truth.k_states;
    if k > 8 {
        return Err(Error::invalid(
            "state alignment enumerates permutations; K must be at most 8",
        ));
    }
    let perms = permutations(k);
    Ok((0..truth.timesteps)
        .map(|t| {
            let target: Vec<Vec<f64>> = (0..k).map(|kk| pm1_expectation(truth, t, kk)).collect();
            let cost = |a: usize, b: usize| -> f64 {
                fitted.emissions[t][b]
                    .mean
                    .iter()
                    .zip(&target[a])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum()
            };
            perms
                .iter()
                .min_by(|p, q| {
                    let cp: f64 = p.iter().enumerate().map(|(a, &b)| cost(a, b)).sum();
                    let cq: f64 = q.iter().enumerate().map(|(a, &b)| cost(a, b)).sum();
                    cp.total_cmp(&cq)
                })
                .expect("at least one permutation")
                .clone()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryErrors {
    pub theta: f64,
    pub transition: f64,
    /// Max-abs difference between fitted means and `2 Phi(mu/sigma) - 1`.
    pub emission_mean: f64,
}

/// Max-abs errors after per-timestep state alignment.
pub fn recovery_errors(fitted: &CmmParams, truth: &CmmParams) -> Result<RecoveryErrors> {
    let perm = align_states(fitted, truth)?;
    let k = truth.k_states;
    let mut e = RecoveryErrors {
        theta: 0.0,
        transition: 0.0,
        emission_mean: 0.0,
    };
    for a in 0..k {
        e.theta = e
            .theta
            .max((fitted.theta[perm[0][a]] - truth.theta[a]).abs());
    }
    for (t, phi) in truth.transitions.iter().enumerate() {
        for a in 0..k {
            for b in 0..k {
                let f = fitted.transitions[t][perm[t][a]][perm[t + 1][b]];
                e.transition = e.transition.max((f - phi[a][b]).abs());
            }
        }
    }
    for t in 0..truth.timesteps {
        for a in 0..k {
            let target = pm1_expectation(truth, t, a);
            let got = &fitted.emissions[t][perm[t][a]].mean;
            for (x, y) in got.iter().zip(&target) {
                e.emission_mean = e.emission_mean.max((x - y).abs());
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_shapes_and_blocks() {
        let g = GeneratorConfig {
            k_states: 3,
            timesteps: 4,
            block_size: 3,
            electives: 3,
            track_mean: 3.0,
            elective_corr: 0.6,
            stay: 0.7,
        };
        let p = g.build().unwrap();
        assert_eq!(p.n_courses, 12);
        assert_eq!(p.transitions.len(), 3);
        // State 1 at t = 1 takes block 2.
        let mu = &p.emissions[1][1].mean;
        assert!(mu
            .iter()
            .take(9)
            .enumerate()
            .all(|(j, &v)| (v > 0.0) == (j / 3 == 2)));
        let row = &p.transitions[1][0];
        assert!((row[1] - 0.7).abs() < 1e-15 && (row[0] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn alignment_recovers_a_known_permutation() {
        let truth = RecoveryConfig::default().generator.build().unwrap();
        // Replace means by their pm1 expectations and permute states at t=2.
        let mut fitted = truth.clone();
        for t in 0..truth.timesteps {
            for k in 0..3 {
                fitted.emissions[t][k].mean = pm1_expectation(&truth, t, k).into();
            }
        }
        let sigma = [2usize, 0, 1];
        let orig = fitted.clone();
        for a in 0..3 {
            fitted.emissions[2][sigma[a]] = orig.emissions[2][a].clone();
            for from in 0..3 {
                fitted.transitions[1][from][sigma[a]] = orig.transitions[1][from][a];
            }
        }
        for a in 0..3 {
            fitted.transitions[2][sigma[a]] = orig.transitions[2][a].clone();
        }
        let perm = align_states(&fitted, &truth).unwrap();
        assert_eq!(perm[2], sigma.to_vec());
        let e = recovery_errors(&fitted, &truth).unwrap();
        assert!(e.transition < 1e-15 && e.emission_mean < 1e-15 && e.theta < 1e-15);
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(1), vec![vec![0]]);
    }
}
