use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_fit_args, clamp_prob, class_totals, log_sum_exp, run_em, BaselineFit, DiscreteMixture,
};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::seed;

/// Naive Bayes mixture: a latent class, then independent Bernoulli
/// variables over the flattened `T * M` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesParams {
    pub timesteps: usize,
    pub n_courses: usize,
    pub theta: Vec<f64>,
    /// `phi[k][t * M + j] = P(x^t_j = 1 | h = k)`.
    pub phi: Vec<Vec<f64>>,
    pub vocab_fingerprint: String,
}

impl NaiveBayesParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.timesteps * self.n_courses;
        if self.theta.is_empty() || self.phi.len() != self.theta.len() {
            return Err(Error::shape("theta and phi must have one entry per class"));
        }
        let s: f64 = self.theta.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.theta.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("theta is not a probability vector"));
        }
        for row in &self.phi {
            if row.len() != d {
                return Err(Error::shape("phi row length must be T * M"));
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid("phi entry outside [0, 1]"));
            }
        }
        Ok(())
    }
}

impl DiscreteMixture for NaiveBayesParams {
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
        self.phi[k]
            .iter()
            .zip(x)
            .map(|(&p, &v)| if v == 1 { p.ln() } else { (1.0 - p).ln() })
            .sum()
    }
    fn sample_class(&self, k: usize, rng: &mut ChaCha8Rng, out: &mut [u8]) {
        for (o, &p) in out.iter_mut().zip(&self.phi[k]) {
            *o = u8::from(rng.random::<f64>() < p);
        }
    }
}

/// EM for a Bernoulli mixture, started from seeded random soft
/// responsibilities.
pub fn nb_fit_em(
    c: &Cohort,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<BaselineFit<NaiveBayesParams>> {
    check_fit_args(c, k, max_iters, tol)?;
    let (t_count, m) = (c.timesteps(), c.n_courses());
    let d = t_count * m;
    let fp = c.vocab().fingerprint();
    let m_step = |resp: &[f64], _: Option<&NaiveBayesParams>| {
        let (theta, nk) = class_totals(resp, k);
        let mut phi = vec![vec![0.0; d]; k];
        for (i, r) in resp.chunks(k).enumerate() {
            let x = c.student(i);
            for (kk, &w) in r.iter().enumerate() {
                for (acc, &v) in phi[kk].iter_mut().zip(x) {
                    if v == 1 {
                        *acc += w;
                    }
                }
            }
        }
        for (row, &n) in phi.iter_mut().zip(&nk) {
            for v in row.iter_mut() {
                *v = if n > 0.0 { clamp_prob(*v / n) } else { 0.5 };
            }
        }
        NaiveBayesParams {
            timesteps: t_count,
            n_courses: m,
            theta,
            phi,
            vocab_fingerprint: fp.clone(),
        }
    };
    Ok(run_em(
        c,
        k,
        max_iters,
        tol,
        seed::derive(seed, "nb-init"),
        "naive Bayes",
        m_step,
    ))
}

/// `P(x^{query_t}_j = 1 | other timesteps)` for every course `j`, treating
/// timestep `query_t` of `record` as unobserved.
pub fn nb_predict_timestep(
    p: &NaiveBayesParams,
    record: &[u8],
    query_t: usize,
) -> Result<Vec<f64>> {
    let m = p.n_courses;
    if record.len() != p.timesteps * m {
        return Err(Error::shape("record length does not match model"));
    }
    if query_t >= p.timesteps {
        return Err(Error::invalid(format!(
            "query timestep {query_t} out of range"
        )));
    }
    let skip = query_t * m..(query_t + 1) * m;
    let joint: Vec<f64> = (0..p.theta.len())
        .map(|k| {
            p.theta[k].ln()
                + p.phi[k]
                    .iter()
                    .zip(record)
                    .enumerate()
                    .filter(|(idx, _)| !skip.contains(idx))
                    .map(|(_, (&q, &v))| if v == 1 { q.ln() } else { (1.0 - q).ln() })
                    .sum::<f64>()
        })
        .collect();
    let z = log_sum_exp(&joint);
    let post: Vec<f64> = joint.iter().map(|v| (v - z).exp()).collect();
    Ok((0..m)
        .map(|j| {
            post.iter()
                .zip(&p.phi)
                .map(|(w, row)| w * row[query_t * m + j])
                .sum()
        })
        .collect())
}
