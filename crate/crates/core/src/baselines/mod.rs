//! Fully discrete mixture baselines over the flattened `T * M` binary
//! vector: a naive Bayes mixture and a tree-augmented naive Bayes mixture,
//! both trained by EM.

mod nb;
mod tan;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Cohort, CourseVocabulary};
use crate::error::{Error, Result};
use crate::{par, seed};

pub use nb::{nb_fit_em, nb_predict_timestep, NaiveBayesParams};
pub use tan::{tan_fit_em, ClassTree, TanParams};

/// Bernoulli and CPT entries are clamped to `[CLAMP_DELTA, 1 - CLAMP_DELTA]`.
pub const CLAMP_DELTA: f64 = 1e-4;

/// Relative slack below which a log-likelihood decrease is not reported.
const MONOTONE_SLACK: f64 = 1e-9;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(CLAMP_DELTA, 1.0 - CLAMP_DELTA)
}

/// Fitted parameters with the per-iteration training log-likelihood.
#[derive(Clone, Debug)]
pub struct BaselineFit<P> {
    pub params: P,
    pub trace: Vec<f64>,
}

/// A mixture over binary vectors with tractable class-conditional
/// likelihoods and ancestral sampling.
pub trait DiscreteMixture: Sync {
    fn theta(&self) -> &[f64];
    fn timesteps(&self) -> usize;
    fn n_courses(&self) -> usize;
    fn vocab_fingerprint(&self) -> &str;
    /// `log P(x | h = k)` for a flattened `T * M` record.
    fn class_loglik(&self, k: usize, x: &[u8]) -> f64;
    /// Draws a flattened record from class `k`.
    fn sample_class(&self, k: usize, rng: &mut ChaCha8Rng, out: &mut [u8]);

    fn k_states(&self) -> usize {
        self.theta().len()
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn check_layout<P: DiscreteMixture + ?Sized>(p: &P, c: &Cohort) -> Result<()> {
    let fp = c.vocab().fingerprint();
    if fp != p.vocab_fingerprint() {
        return Err(Error::Fingerprint {
            model: p.vocab_fingerprint().to_string(),
            data: fp,
        });
    }
    if c.timesteps() != p.timesteps() || c.n_courses() != p.n_courses() {
        return Err(Error::shape("cohort layout does not match model"));
    }
    Ok(())
}

/// Per-student `log sum_k theta_k P(x | h = k)`.
pub fn model_loglik<P: DiscreteMixture + ?Sized>(p: &P, c: &Cohort) -> Result<Vec<f64>> {
    check_layout(p, c)?;
    Ok(par::map_indexed(c.n_students(), |i| {
        let x = c.student(i);
        let joint: Vec<f64> = (0..p.k_states())
            .map(|k| p.theta()[k].ln() + p.class_loglik(k, x))
            .collect();
        log_sum_exp(&joint)
    }))
}

/// Ancestral sampling with one derived stream per student, labelled with
/// `vocab`.
pub fn model_sample<P: DiscreteMixture + ?Sized>(
    p: &P,
    vocab: &CourseVocabulary,
    n: usize,
    seed: u64,
) -> Result<Cohort> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    if vocab.len() != p.n_courses() || vocab.fingerprint() != p.vocab_fingerprint() {
        return Err(Error::shape("vocabulary does not match model"));
    }
    let d = p.timesteps() * p.n_courses();
    let rows = par::map_indexed(n, |i| {
        let mut rng = seed::rng(seed::derive_indexed(seed, "baseline-student", i as u64));
        let k = crate::cmm::sample_categorical(&mut rng, p.theta());
        let mut out = vec![0u8; d];
        p.sample_class(k, &mut rng, &mut out);
        out
    });
    Cohort::from_rows(vocab.clone(), p.timesteps(), rows.concat())
}

fn check_fit_args(c: &Cohort, k: usize, max_iters: usize, tol: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("need at least one latent class"));
    }
    if c.n_students() == 0 {
        return Err(Error::invalid("cohort is empty"));
    }
    if k > c.n_students() {
        return Err(Error::invalid(format!(
            "{k} latent classes for {} students",
            c.n_students()
        )));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be positive"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    Ok(())
}

/// Random soft responsibilities, row-major `N x K`.
fn random_responsibilities(n: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    let mut r = vec![0.0; n * k];
    for row in r.chunks_mut(k) {
        for v in row.iter_mut() {
            *v = rng.random::<f64>() + 1e-3;
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    r
}

/// E-step: responsibilities and total log-likelihood.
fn e_step<P: DiscreteMixture>(p: &P, c: &Cohort) -> (Vec<f64>, f64) {
    let k = p.k_states();
    let rows = par::map_indexed(c.n_students(), |i| {
        let x = c.student(i);
        let mut joint: Vec<f64> = (0..k)
            .map(|kk| p.theta()[kk].ln() + p.class_loglik(kk, x))
            .collect();
        let ll = log_sum_exp(&joint);
        joint.iter_mut().for_each(|v| *v = (*v - ll).exp());
        (joint, ll)
    });
    let mut resp = Vec::with_capacity(c.n_students() * k);
    let mut total = 0.0;
    for (r, ll) in rows {
        resp.extend(r);
        total += ll;
    }
    (resp, total)
}

/// Generic EM loop: random soft start, then alternate M- and E-steps,
/// recording the log-likelihood of every fitted iterate.
fn run_em<P, F>(
    c: &Cohort,
    k: usize,
    max_iters: usize,
    tol: f64,
    init_seed: u64,
    what: &str,
    mut m_step: F,
) -> BaselineFit<P>
where
    P: DiscreteMixture,
    F: FnMut(&[f64], Option<&P>) -> P,
{
    let resp = random_responsibilities(c.n_students(), k, init_seed);
    let mut model = m_step(&resp, None);
    let mut trace: Vec<f64> = Vec::with_capacity(max_iters);
    for it in 0..max_iters {
        let (resp, ll) = e_step(&model, c);
        if let Some(&prev) = trace.last() {
            if ll < prev - MONOTONE_SLACK * prev.abs() {
                log::warn!("{what} EM log-likelihood decreased at iteration {it}: {prev} -> {ll}");
            }
            trace.push(ll);
            if ll - prev < tol * prev.abs() {
                break;
            }
        } else {
            trace.push(ll);
        }
        if it + 1 == max_iters {
            break;
        }
        model = m_step(&resp, Some(&model));
    }
    log::info!(
        "{what} EM finished after {} iterations, loglik {:.6}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    BaselineFit {
        params: model,
        trace,
    }
}

/// Runs `fit` for restarts `0..restarts` (at least one) and keeps the fit
/// with the highest final training log-likelihood; ties keep the earlier
/// restart.
pub fn best_of_restarts<P>(
    restarts: usize,
    fit: impl Fn(usize) -> Result<BaselineFit<P>>,
) -> Result<BaselineFit<P>> {
    let mut best: Option<BaselineFit<P>> = None;
    for r in 0..restarts.max(1) {
        let f = fit(r)?;
        let ll = *f.trace.last().expect("EM traces are never empty");
        if best
            .as_ref()
            .is_none_or(|b| ll > *b.trace.last().expect("EM traces are never empty"))
        {
            best = Some(f);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Class weights from responsibilities; also returns per-class totals.
fn class_totals(resp: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nk = vec![0.0; k];
    for row in resp.chunks(k) {
        for (a, r) in nk.iter_mut().zip(row) {
            *a += r;
        }
    }
    let n: f64 = nk.iter().sum();
    let theta = nk.iter().map(|v| v / n).collect();
    (theta, nk)
}
