//! Contextual mixture model.
//!
//! A hidden state `h^t` in `0..K` evolves through per-timestep transition
//! matrices; at each timestep the `{-1,+1}`-relaxed enrollment vector is
//! drawn from a Gaussian specific to `(t, h^t)`. Nothing is shared across
//! timesteps, so states at different timesteps need not correspond.

mod em;
mod forward_backward;
mod inference;
mod refine;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, CourseVocabulary};
use crate::error::{Error, Result};
use crate::gaussian::{MvnFactor, MvnParams};
use crate::{par, seed};

pub use em::{em_fit_pm1, EmConfig, EmEvent, EmFit};
pub use forward_backward::{forward_backward, viterbi, Posterior, PosteriorSet};
pub use inference::{
    decode_path, infer_intermediate, infer_intermediate_with, posteriors, student_loglik,
    transition_flows, LikelihoodMode, LogEstimate, ObservationMask, SankeyExport, SankeyLink,
    SankeyNode, TimestepObservation,
};
pub use refine::{
    factor_gradient, pattern_log_prob_gradient, refine_policy_gradient, PatternGradient,
    RefineResult,
};

/// Parameters of a contextual mixture model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmmParams {
    pub k_states: usize,
    pub timesteps: usize,
    pub n_courses: usize,
    /// Initial state distribution.
    pub theta: Vec<f64>,
    /// `transitions[t][k][k']`: probability of moving from `k` at `t` to
    /// `k'` at `t + 1`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `emissions[t][k]`.
    pub emissions: Vec<Vec<MvnParams>>,
    pub vocab_fingerprint: String,
}

impl CmmParams {
    pub fn validate(&self) -> Result<()> {
        let (k, t, m) = (self.k_states, self.timesteps, self.n_courses);
        if k == 0 || t == 0 {
            return Err(Error::invalid(
                "model needs at least one state and one timestep",
            ));
        }
        check_simplex(&self.theta, k, "theta")?;
        if self.transitions.len() != t - 1 {
            return Err(Error::shape(format!(
                "{} transition matrices for {t} timesteps",
                self.transitions.len()
            )));
        }
        for (ti, phi) in self.transitions.iter().enumerate() {
            if phi.len() != k {
                return Err(Error::shape(format!(
                    "transition {ti} has {} rows",
                    phi.len()
                )));
            }
            for (r, row) in phi.iter().enumerate() {
                check_simplex(row, k, &format!("transition {ti} row {r}"))?;
            }
        }
        if self.emissions.len() != t || self.emissions.iter().any(|e| e.len() != k) {
            return Err(Error::shape("emissions must be T x K"));
        }
        for (ti, row) in self.emissions.iter().enumerate() {
            for (ki, e) in row.iter().enumerate() {
                if e.dim() != m {
                    return Err(Error::shape(format!(
                        "emission ({ti},{ki}) has dimension {}",
                        e.dim()
                    )));
                }
                e.factorize().map_err(|_| {
                    Error::NotPositiveDefinite(format!(" (emission t={ti}, k={ki})"))
                })?;
            }
        }
        Ok(())
    }

    pub fn factors(&self) -> Result<Vec<Vec<MvnFactor>>> {
        self.emissions
            .iter()
            .map(|row| row.iter().map(MvnFactor::new).collect())
            .collect()
    }

    /// Marginal state distribution at each timestep.
    pub fn state_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.theta.clone()];
        for phi in &self.transitions {
            let prev = out.last().expect("non-empty");
            let next = (0..self.k_states)
                .map(|k2| (0..self.k_states).map(|k| prev[k] * phi[k][k2]).sum())
                .collect();
            out.push(next);
        }
        out
    }

    /// `P(x^t_j = 1)` for every `(t, j)` under the sign-threshold model.
    pub fn course_marginals(&self) -> Vec<Vec<f64>> {
        self.state_marginals()
            .iter()
            .zip(&self.emissions)
            .map(|(w, row)| {
                (0..self.n_courses)
                    .map(|j| {
                        w.iter()
                            .zip(row)
                            .map(|(wk, e)| wk * crate::gaussian::normal_cdf(e.mean[j] / e.sd(j)))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn check_cohort(&self, c: &Cohort) -> Result<()> {
        let fp = c.vocab().fingerprint();
        if fp != self.vocab_fingerprint {
            return Err(Error::Fingerprint {
                model: self.vocab_fingerprint.clone(),
                data: fp,
            });
        }
        if c.timesteps() != self.timesteps || c.n_courses() != self.n_courses {
            return Err(Error::shape("cohort layout does not match model"));
        }
        Ok(())
    }

    /// Builds parameters from plain arrays, for hand-constructed models.
    pub fn from_parts(
        theta: Vec<f64>,
        transitions: Vec<Vec<Vec<f64>>>,
        means: Vec<Vec<Vec<f64>>>,
        covs: Vec<Vec<DMatrix<f64>>>,
        vocab: &CourseVocabulary,
    ) -> Result<Self> {
        let t = means.len();
        let k = theta.len();
        let emissions = means
            .into_iter()
            .zip(covs)
            .map(|(mrow, crow)| {
                mrow.into_iter()
                    .zip(crow)
                    .map(|(m, c)| MvnParams::new(DVector::from_vec(m), c))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let p = Self {
            k_states: k,
            timesteps: t,
            n_courses: vocab.len(),
            theta,
            transitions,
            emissions,
            vocab_fingerprint: vocab.fingerprint(),
        };
        p.validate()?;
        Ok(p)
    }
}

fn check_simplex(v: &[f64], k: usize, what: &str) -> Result<()> {
    if v.len() != k {
        return Err(Error::shape(format!(
            "{what} has length {}, expected {k}",
            v.len()
        )));
    }
    if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::invalid(format!(
            "{what} has an entry outside [0, 1]"
        )));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the cumulative sum; pick the last
    // state with positive mass.
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// Ancestral sampling: `h^0 ~ theta`, `h^{t+1} ~ phi^t[h^t]`,
/// `xbar^t ~ N(mu^t_h, Sigma^t_h)`, enrollment = `xbar > 0`.
///
/// Student `i` draws from its own stream derived from `(seed, i)`.
pub fn sample_students(p: &CmmParams, n: usize, seed: u64) -> Result<Cohort> {
    p.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let factors = p.factors()?;
    let (t_count, m) = (p.timesteps, p.n_courses);
    let rows = par::map_indexed(n, |i| {
        let mut rng = seed::rng(seed::derive_indexed(seed, "cmm-student", i as u64));
        let mut out = vec![0u8; t_count * m];
        let mut eps = vec![0.0; m];
        let mut xbar = vec![0.0; m];
        let mut h = sample_categorical(&mut rng, &p.theta);
        for t in 0..t_count {
            if t > 0 {
                h = sample_categorical(&mut rng, &p.transitions[t - 1][h]);
            }
            factors[t][h].sample_into(&mut rng, &mut eps, &mut xbar);
            for j in 0..m {
                out[t * m + j] = u8::from(xbar[j] > 0.0);
            }
        }
        out
    });
    let vocab = CourseVocabulary::synthetic(m);
    let data = rows.concat();
    let cohort = Cohort::from_rows(vocab, t_count, data)?;
    Ok(cohort)
}

/// Like [`sample_students`] but labels columns with `vocab`.
pub fn sample_students_with_vocab(
    p: &CmmParams,
    vocab: &CourseVocabulary,
    n: usize,
    seed: u64,
) -> Result<Cohort> {
    if vocab.len() != p.n_courses {
        return Err(Error::shape("vocabulary size does not match model"));
    }
    let c = sample_students(p, n, seed)?;
    Cohort::new(
        vocab.clone(),
        c.timesteps(),
        c.student_ids().to_vec(),
        c.raw().to_vec(),
    )
}

/// `T x K` matrix (row-major) of `log N(xbar^t; mu^t_k, Sigma^t_k)` for
/// one student's `{-1,+1}` relaxation.
pub(crate) fn pm1_loglik_matrix(factors: &[Vec<MvnFactor>], student: &[u8], m: usize) -> Vec<f64> {
    let t_count = factors.len();
    let k = factors[0].len();
    let mut out = Vec::with_capacity(t_count * k);
    let mut xbar = vec![0.0; m];
    for (t, row) in factors.iter().enumerate() {
        for (j, x) in xbar.iter_mut().enumerate() {
            *x = 2.0 * student[t * m + j] as f64 - 1.0;
        }
        out.extend(row.iter().map(|f| f.logpdf(&xbar)));
    }
    out
}

/// Two states with opposite saturated emissions over the two halves of
/// the courses, persisting with probability `stay`.
#[cfg(test)]
pub(crate) fn tests_support_saturated(t: usize, m: usize, stay: f64) -> CmmParams {
    let vocab = CourseVocabulary::synthetic(m);
    let half = m / 2;
    let pattern = |k: usize| -> Vec<f64> {
        (0..m)
            .map(|j| if (j < half) == (k == 0) { 6.0 } else { -6.0 })
            .collect()
    };
    CmmParams::from_parts(
        vec![0.5, 0.5],
        vec![vec![vec![stay, 1.0 - stay], vec![1.0 - stay, stay]]; t - 1],
        vec![vec![pattern(0), pattern(1)]; t],
        vec![vec![DMatrix::identity(m, m) * 0.25; 2]; t],
        &vocab,
    )
    .unwrap()
}
