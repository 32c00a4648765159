//! Policy-gradient refinement of emission parameters.
//!
//! Each `(t, k)` emission is treated as a stochastic policy over draws `y`
//! of the enrolled block of a pattern, rewarded by the smoothed orthant
//! reward. The gradient of `log P(pattern)` combines a score-function term
//! for the sampling distribution (with the batch-mean reward as baseline)
//! and the analytic derivative of the reward's conditional CDF product.
//! Covariances are updated through their lower Cholesky factor with a
//! log-parametrized diagonal.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use super::{posteriors, CmmParams};
use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::gaussian::{normal_cdf, normal_pdf, sample_mvn, BinaryPattern, Conditional, MvnParams};
use crate::{par, seed};

/// `log P(pattern)` estimate and its gradient for one emission.
#[derive(Clone, Debug)]
pub struct PatternGradient {
    pub prob: f64,
    pub log_prob: f64,
    pub baseline: f64,
    /// `d log P / d mu`.
    pub grad_mean: DVector<f64>,
    /// Symmetric `d log P / d Sigma`.
    pub grad_cov: DMatrix<f64>,
}

/// Score-function estimate of `grad log P(pattern)` from `k_mc` draws of the
/// enrolled block, `sample_mvn(p.marginal(G), k_mc, seed)`.
///
/// For a draw `y` with `d = y - mu_G`, `A = Sigma_GG^{-1}`,
/// `B = Sigma_LG A`, conditional mean `m = mu_L + B d` and conditional
/// variances `s^2 = diag(Sigma_LL - B Sigma_GL)`, the reward is
/// `R = prod Phi(-m_j / s_j) * frac(y > 0)`. The returned gradient is
/// `sum_i [(R_i - b) score_i + R_i grad log prod Phi] / sum_i R_i` where
/// `b` is the mean reward.
///
/// Returns a zero gradient with `prob = 0` if every draw has zero reward.
pub fn pattern_log_prob_gradient(
    p: &MvnParams,
    pattern: &BinaryPattern,
    k_mc: usize,
    seed: u64,
) -> Result<PatternGradient> {
    if pattern.len() != p.dim() {
        return Err(Error::shape("pattern length does not match distribution"));
    }
    if k_mc == 0 {
        return Err(Error::invalid("Monte-Carlo sample count must be positive"));
    }
    let m = p.dim();
    let gi = pattern.positive();
    let cond = Conditional::new(p, &gi)?;
    let li = cond.l.clone();
    let (ng, nl) = (gi.len(), li.len());
    let sd = cond.cond_sd()?;
    let b_mat = cond.regression().clone();
    let a_mat = if ng == 0 {
        DMatrix::zeros(0, 0)
    } else {
        cond.marginal_g()
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(" (enrolled block)".into()))?
            .inverse()
    };
    let draws = if ng == 0 {
        vec![Vec::new(); k_mc]
    } else {
        sample_mvn(&p.marginal(&gi)?, k_mc, seed)?
    };

    let mut sum_r = 0.0;
    let mut s1 = DVector::<f64>::zeros(ng);
    let mut s2 = DVector::<f64>::zeros(ng);
    let mut s3 = DMatrix::<f64>::zeros(ng, ng);
    let mut s4 = DMatrix::<f64>::zeros(ng, ng);
    let mut ru = DVector::<f64>::zeros(nl);
    let mut rw = DVector::<f64>::zeros(nl);
    let mut ru_ad = DMatrix::<f64>::zeros(nl, ng);

    let mu_g = DVector::from_fn(ng, |i, _| p.mean[gi[i]]);
    let mut u = DVector::<f64>::zeros(nl);
    let mut w = DVector::<f64>::zeros(nl);
    for y in &draws {
        let d = DVector::from_fn(ng, |i, _| y[i] - mu_g[i]);
        let ad = &a_mat * &d;
        s2 += &ad;
        s4 += &ad * ad.transpose();

        let soft = if ng == 0 {
            1.0
        } else {
            y.iter().filter(|&&v| v > 0.0).count() as f64 / ng as f64
        };
        if soft == 0.0 {
            continue;
        }
        let cm = cond.cond_mean(y);
        let mut prod = 1.0;
        for j in 0..nl {
            let z = -cm[j] / sd[j];
            let phi_z = normal_cdf(z);
            prod *= phi_z;
            let mills = if phi_z > 0.0 {
                normal_pdf(z) / phi_z
            } else {
                -z
            };
            u[j] = -mills / sd[j];
            w[j] = mills * cm[j] / (2.0 * sd[j].powi(3));
        }
        let r = prod * soft;
        if r == 0.0 {
            continue;
        }
        sum_r += r;
        s1 += &ad * r;
        s3 += &ad * ad.transpose() * r;
        ru += &u * r;
        rw += &w * r;
        ru_ad += &u * ad.transpose() * r;
    }

    let k = k_mc as f64;
    if sum_r == 0.0 {
        return Ok(PatternGradient {
            prob: 0.0,
            log_prob: f64::NEG_INFINITY,
            baseline: 0.0,
            grad_mean: DVector::zeros(m),
            grad_cov: DMatrix::zeros(m, m),
        });
    }
    let baseline = sum_r / k;

    let gm_g = (&s1 - &s2 * baseline) - b_mat.transpose() * &ru;
    let gm_l = ru.clone();
    let w_diag = DMatrix::from_diagonal(&rw);
    let g_ll = w_diag.clone();
    let g_lg = (&ru_ad - &w_diag * &b_mat * 2.0) * 0.5;
    let cross = -(b_mat.transpose() * &ru_ad);
    let g_gg = (&s3 - &s4 * baseline) * 0.5
        + (&cross + cross.transpose()) * 0.5
        + b_mat.transpose() * &w_diag * &b_mat;

    let mut grad_mean = DVector::zeros(m);
    let mut grad_cov = DMatrix::zeros(m, m);
    for (a, &ia) in gi.iter().enumerate() {
        grad_mean[ia] = gm_g[a];
        for (b, &ib) in gi.iter().enumerate() {
            grad_cov[(ia, ib)] = g_gg[(a, b)];
        }
    }
    for (a, &ia) in li.iter().enumerate() {
        grad_mean[ia] = gm_l[a];
        for (b, &ib) in li.iter().enumerate() {
            grad_cov[(ia, ib)] = g_ll[(a, b)];
        }
        for (b, &ib) in gi.iter().enumerate() {
            grad_cov[(ia, ib)] = g_lg[(a, b)];
            grad_cov[(ib, ia)] = g_lg[(a, b)];
        }
    }
    grad_mean /= sum_r;
    grad_cov /= sum_r;
    Ok(PatternGradient {
        prob: baseline,
        log_prob: baseline.ln(),
        baseline,
        grad_mean,
        grad_cov,
    })
}

/// Chain rule from a symmetric covariance gradient to the lower Cholesky
/// factor `C` (`Sigma = C C^T`), with diagonal entries differentiated with
/// respect to `log C_jj`.
pub fn factor_gradient(grad_cov: &DMatrix<f64>, lower: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = (grad_cov * lower) * 2.0;
    let m = g.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            g[(i, j)] = 0.0;
        }
        g[(i, i)] *= lower[(i, i)];
    }
    g
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub params: CmmParams,
    /// Objective before each step, then after the last completed step.
    pub objective_trace: Vec<f64>,
    /// Set when a non-finite gradient stopped the refinement early.
    pub aborted: Option<String>,
}

/// Students per distinct binary pattern at each timestep, weighted by state.
type PatternWeights = Vec<BTreeMap<Vec<u8>, Vec<f64>>>;

fn pattern_weights(p: &CmmParams, c: &Cohort) -> Result<PatternWeights> {
    let posts = posteriors(p, c)?;
    let (k, m) = (p.k_states, p.n_courses);
    let mut out = vec![BTreeMap::new(); p.timesteps];
    for (i, post) in posts.iter().enumerate() {
        for (t, groups) in out.iter_mut().enumerate() {
            let entry = groups
                .entry(c.student(i)[t * m..(t + 1) * m].to_vec())
                .or_insert_with(|| vec![0.0; k]);
            for (e, g) in entry.iter_mut().zip(post.gamma_row(t)) {
                *e += g;
            }
        }
    }
    Ok(out)
}

const MIN_PATTERN_WEIGHT: f64 = 1e-8;

struct CellGradient {
    objective: f64,
    grad_mean: DVector<f64>,
    grad_cov: DMatrix<f64>,
}

/// Gradient ascent on
/// `(1/N) sum_i sum_{t,k} gamma_i[t,k] log P_tk(x_i^t)`
/// with state weights recomputed from the current parameters at each step.
/// Only emission parameters move.
///
/// Patterns whose estimate is zero contribute `log(0.5 / k_mc)` to the
/// reported objective and nothing to the gradient.
pub fn refine_policy_gradient(
    p: &CmmParams,
    c: &Cohort,
    steps: usize,
    learning_rate: f64,
    k_mc: usize,
    seed: u64,
) -> Result<RefineResult> {
    if steps == 0 {
        return Err(Error::invalid("refinement needs at least one step"));
    }
    if c.n_students() == 0 {
        return Err(Error::invalid("refinement needs a non-empty cohort"));
    }
    p.check_cohort(c)?;
    let (t_count, k) = (p.timesteps, p.k_states);
    let n = c.n_students() as f64;
    let floor = (0.5 / k_mc.max(1) as f64).ln();

    let mut cur = p.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    let mut aborted = None;

    let evaluate = |params: &CmmParams, step: usize| -> Result<Vec<CellGradient>> {
        let weights = pattern_weights(params, c)?;
        par::map_indexed(t_count * k, |cell| {
            let (t, kk) = (cell / k, cell % k);
            let e = &params.emissions[t][kk];
            let m = e.dim();
            let mut acc = CellGradient {
                objective: 0.0,
                grad_mean: DVector::zeros(m),
                grad_cov: DMatrix::zeros(m, m),
            };
            let tag = format!("pg-{step}-{t}-{kk}");
            for (pi, (bits, w)) in weights[t].iter().enumerate() {
                let wk = w[kk];
                if wk < MIN_PATTERN_WEIGHT {
                    continue;
                }
                let pattern = BinaryPattern::new(bits.clone())?;
                let s = seed::derive_indexed(seed, &tag, pi as u64);
                let g = pattern_log_prob_gradient(e, &pattern, k_mc, s)?;
                if g.prob > 0.0 {
                    acc.objective += wk * g.log_prob;
                    acc.grad_mean += &g.grad_mean * wk;
                    acc.grad_cov += &g.grad_cov * wk;
                } else {
                    acc.objective += wk * floor;
                }
            }
            Ok(acc)
        })
        .into_iter()
        .collect()
    };

    for step in 0..steps {
        let cells = evaluate(&cur, step)?;
        trace.push(cells.iter().map(|g| g.objective).sum::<f64>() / n);

        let mut next = cur.clone();
        let mut bad = None;
        for (cell, g) in cells.iter().enumerate() {
            let (t, kk) = (cell / k, cell % k);
            let e = &cur.emissions[t][kk];
            let lower = e
                .cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite(format!(" (emission t={t}, k={kk})")))?
                .unpack();
            let gm = &g.grad_mean / n;
            let gc = factor_gradient(&(&g.grad_cov / n), &lower);
            if gm.iter().chain(gc.iter()).any(|v| !v.is_finite()) {
                bad = Some(format!("non-finite gradient at step {step}, t={t}, k={kk}"));
                break;
            }
            let mut new_lower = lower.clone();
            let mdim = e.dim();
            for i in 0..mdim {
                for j in 0..i {
                    new_lower[(i, j)] += learning_rate * gc[(i, j)];
                }
                new_lower[(i, i)] = (lower[(i, i)].ln() + learning_rate * gc[(i, i)]).exp();
            }
            let cov = &new_lower * new_lower.transpose();
            let cov = (&cov + cov.transpose()) * 0.5;
            let mean = &e.mean + gm * learning_rate;
            if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                bad = Some(format!(
                    "non-finite parameters at step {step}, t={t}, k={kk}"
                ));
                break;
            }
            next.emissions[t][kk] = MvnParams { mean, cov };
        }
        if let Some(msg) = bad {
            log::error!("policy-gradient refinement aborted: {msg}");
            aborted = Some(msg);
            break;
        }
        cur = next;
    }

    if aborted.is_none() {
        let cells = evaluate(&cur, steps)?;
        trace.push(cells.iter().map(|g| g.objective).sum::<f64>() / n);
    }
    Ok(RefineResult {
        params: cur,
        objective_trace: trace,
        aborted,
    })
}
