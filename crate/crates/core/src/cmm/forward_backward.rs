use serde::{Deserialize, Serialize};

use super::CmmParams;
use crate::error::{Error, Result};

/// Smoothed posteriors for one student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub k_states: usize,
    /// `T x K`, row-major: `Q(h^t = k | X)`.
    pub gamma: Vec<f64>,
    /// `(T-1) x K x K`: `Q(h^t = k, h^{t+1} = k' | X)`.
    pub xi: Vec<f64>,
    pub loglik: f64,
}

impl Posterior {
    pub fn gamma_row(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.k_states..(t + 1) * self.k_states]
    }

    pub fn xi_at(&self, t: usize, k: usize, k2: usize) -> f64 {
        let kk = self.k_states;
        self.xi[(t * kk + k) * kk + k2]
    }
}

pub type PosteriorSet = Vec<Posterior>;

/// Scaled forward-backward over a `T x K` matrix of per-state observation
/// log-likelihoods (row-major, `-inf` allowed).
///
/// Each timestep's likelihood row is shifted by its maximum before
/// exponentiation and the forward messages are renormalized; the shifts and
/// normalizers accumulate into the log-likelihood. When sharply peaked
/// likelihoods meet zero transitions the shifted rows can underflow along
/// every allowed path; the recursion is then redone in log space.
pub fn forward_backward(p: &CmmParams, like: &[f64]) -> Result<Posterior> {
    let (t_count, k) = (p.timesteps, p.k_states);
    if like.len() != t_count * k {
        return Err(Error::shape(format!(
            "likelihood matrix has {} entries, expected {}",
            like.len(),
            t_count * k
        )));
    }
    match scaled(p, like)? {
        Some(post) => Ok(post),
        None => log_space(p, like),
    }
}

/// The scaled recursion; `None` when a forward normalizer underflows.
fn scaled(p: &CmmParams, like: &[f64]) -> Result<Option<Posterior>> {
    let (t_count, k) = (p.timesteps, p.k_states);
    let mut emit = vec![0.0; t_count * k];
    let mut shift = vec![0.0; t_count];
    for t in 0..t_count {
        let row = &like[t * k..(t + 1) * k];
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical(format!(
                "invalid likelihood at timestep {t}"
            )));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return Err(Error::ImpossibleObservation { t });
        }
        shift[t] = mx;
        for (e, v) in emit[t * k..(t + 1) * k].iter_mut().zip(row) {
            *e = (v - mx).exp();
        }
    }

    let mut alpha = vec![0.0; t_count * k];
    let mut scale = vec![0.0; t_count];
    for kk in 0..k {
        alpha[kk] = p.theta[kk] * emit[kk];
    }
    for t in 0..t_count {
        if t > 0 {
            let phi = &p.transitions[t - 1];
            for k2 in 0..k {
                let mut s = 0.0;
                for k1 in 0..k {
                    s += alpha[(t - 1) * k + k1] * phi[k1][k2];
                }
                alpha[t * k + k2] = s * emit[t * k + k2];
            }
        }
        let s: f64 = alpha[t * k..(t + 1) * k].iter().sum();
        if s <= 0.0 || !s.is_finite() {
            return Ok(None);
        }
        scale[t] = s;
        for a in &mut alpha[t * k..(t + 1) * k] {
            *a /= s;
        }
    }

    let mut beta = vec![1.0; t_count * k];
    for t in (0..t_count.saturating_sub(1)).rev() {
        let phi = &p.transitions[t];
        for k1 in 0..k {
            let mut s = 0.0;
            for k2 in 0..k {
                s += phi[k1][k2] * emit[(t + 1) * k + k2] * beta[(t + 1) * k + k2];
            }
            beta[t * k + k1] = s / scale[t + 1];
        }
    }

    let mut gamma = vec![0.0; t_count * k];
    for t in 0..t_count {
        let row = &mut gamma[t * k..(t + 1) * k];
        for kk in 0..k {
            row[kk] = alpha[t * k + kk] * beta[t * k + kk];
        }
        let s: f64 = row.iter().sum();
        for g in row.iter_mut() {
            *g /= s;
        }
    }

    let mut xi = vec![0.0; t_count.saturating_sub(1) * k * k];
    for t in 0..t_count.saturating_sub(1) {
        let phi = &p.transitions[t];
        let block = &mut xi[t * k * k..(t + 1) * k * k];
        for k1 in 0..k {
            for k2 in 0..k {
                block[k1 * k + k2] = alpha[t * k + k1]
                    * phi[k1][k2]
                    * emit[(t + 1) * k + k2]
                    * beta[(t + 1) * k + k2];
            }
        }
        let s: f64 = block.iter().sum();
        for v in block.iter_mut() {
            *v /= s;
        }
    }

    let loglik = shift.iter().sum::<f64>() + scale.iter().map(|s| s.ln()).sum::<f64>();
    Ok(Some(Posterior {
        k_states: k,
        gamma,
        xi,
        loglik,
    }))
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-space recursion: slower, but exact whenever some path has positive
/// probability.
fn log_space(p: &CmmParams, like: &[f64]) -> Result<Posterior> {
    let (t_count, k) = (p.timesteps, p.k_states);
    let log_phi: Vec<Vec<Vec<f64>>> = p
        .transitions
        .iter()
        .map(|m| {
            m.iter()
                .map(|r| r.iter().map(|v| v.ln()).collect())
                .collect()
        })
        .collect();
    let mut la = vec![f64::NEG_INFINITY; t_count * k];
    for kk in 0..k {
        la[kk] = p.theta[kk].ln() + like[kk];
    }
    for t in 0..t_count {
        if t > 0 {
            for k2 in 0..k {
                let prev = (0..k).map(|k1| la[(t - 1) * k + k1] + log_phi[t - 1][k1][k2]);
                la[t * k + k2] = log_sum_exp(prev) + like[t * k + k2];
            }
        }
        if la[t * k..(t + 1) * k]
            .iter()
            .all(|&v| v == f64::NEG_INFINITY)
        {
            return Err(Error::ImpossibleObservation { t });
        }
    }
    let mut lb = vec![0.0; t_count * k];
    for t in (0..t_count.saturating_sub(1)).rev() {
        for k1 in 0..k {
            let next =
                (0..k).map(|k2| log_phi[t][k1][k2] + like[(t + 1) * k + k2] + lb[(t + 1) * k + k2]);
            lb[t * k + k1] = log_sum_exp(next);
        }
    }
    let loglik = log_sum_exp(la[(t_count - 1) * k..].iter().copied());
    let gamma = la
        .iter()
        .zip(&lb)
        .map(|(a, b)| (a + b - loglik).exp())
        .collect();
    let mut xi = vec![0.0; t_count.saturating_sub(1) * k * k];
    for t in 0..t_count.saturating_sub(1) {
        for k1 in 0..k {
            for k2 in 0..k {
                let v = la[t * k + k1]
                    + log_phi[t][k1][k2]
                    + like[(t + 1) * k + k2]
                    + lb[(t + 1) * k + k2];
                xi[(t * k + k1) * k + k2] = (v - loglik).exp();
            }
        }
    }
    Ok(Posterior {
        k_states: k,
        gamma,
        xi,
        loglik,
    })
}

/// Most probable hidden path under the given log-likelihoods. Ties go to
/// the lower state index.
pub fn viterbi(p: &CmmParams, like: &[f64]) -> Result<Vec<usize>> {
    let (t_count, k) = (p.timesteps, p.k_states);
    if like.len() != t_count * k {
        return Err(Error::shape("likelihood matrix does not match model"));
    }
    let mut score: Vec<f64> = (0..k).map(|kk| p.theta[kk].ln() + like[kk]).collect();
    if score.iter().all(|&s| s == f64::NEG_INFINITY) {
        return Err(Error::ImpossibleObservation { t: 0 });
    }
    let mut back = vec![0usize; t_count * k];
    for t in 1..t_count {
        let phi = &p.transitions[t - 1];
        let mut next = vec![f64::NEG_INFINITY; k];
        for k2 in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for k1 in 0..k {
                let s = score[k1] + phi[k1][k2].ln();
                if s > best {
                    best = s;
                    arg = k1;
                }
            }
            next[k2] = best + like[t * k + k2];
            back[t * k + k2] = arg;
        }
        if next.iter().all(|&s| s == f64::NEG_INFINITY) {
            return Err(Error::ImpossibleObservation { t });
        }
        score = next;
    }
    let mut last = 0;
    for kk in 1..k {
        if score[kk] > score[last] {
            last = kk;
        }
    }
    let mut path = vec![0; t_count];
    path[t_count - 1] = last;
    for t in (1..t_count).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CourseVocabulary;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn chain(theta: Vec<f64>, phis: Vec<Vec<Vec<f64>>>) -> CmmParams {
        let t = phis.len() + 1;
        let k = theta.len();
        CmmParams::from_parts(
            theta,
            phis,
            vec![vec![vec![0.0]; k]; t],
            vec![vec![DMatrix::identity(1, 1); k]; t],
            &CourseVocabulary::synthetic(1),
        )
        .unwrap()
    }

    fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn single_state() {
        let p = chain(vec![1.0], vec![vec![vec![1.0]]; 2]);
        let like = [-1.5, -0.25, -3.0];
        let post = forward_backward(&p, &like).unwrap();
        assert!(post.gamma.iter().all(|&g| (g - 1.0).abs() < 1e-15));
        assert!(post.xi.iter().all(|&g| (g - 1.0).abs() < 1e-15));
        assert_abs_diff_eq!(post.loglik, -4.75, epsilon = 1e-12);
        assert_eq!(viterbi(&p, &like).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn symmetric_model_gives_uniform_gamma() {
        let u = vec![1.0 / 3.0; 3];
        let p = chain(u.clone(), vec![vec![u.clone(); 3]; 2]);
        let like = [-1.0, -1.0, -1.0, -2.0, -2.0, -2.0, -0.5, -0.5, -0.5];
        let post = forward_backward(&p, &like).unwrap();
        for g in post.gamma {
            assert_abs_diff_eq!(g, 1.0 / 3.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn all_states_impossible_is_an_error() {
        let p = chain(vec![0.5, 0.5], vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]);
        let ninf = f64::NEG_INFINITY;
        let err = forward_backward(&p, &[0.0, 0.0, ninf, ninf]).unwrap_err();
        assert!(matches!(err, Error::ImpossibleObservation { t: 1 }));
        // Reachable states only through a zero transition.
        let p = chain(vec![1.0, 0.0], vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]);
        assert!(forward_backward(&p, &[0.0, 0.0, ninf, 0.0]).is_err());
    }

    #[test]
    fn underflowing_rows_fall_back_to_log_space() {
        // State 0 dominates t = 0 and state 1 dominates t = 1 by more than
        // the double range, but 0 -> 1 is forbidden; the only positive-mass
        // paths run through the heavily penalized states.
        let p = chain(vec![0.5, 0.5], vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]);
        let like = [0.0, -800.0, -900.0, 0.0];
        let post = forward_backward(&p, &like).unwrap();
        let want = log_sum_exp([-800.0 - 900.0, -800.0 + 0.0].into_iter()) + 0.5f64.ln();
        assert_abs_diff_eq!(post.loglik, want, epsilon = 1e-9);
        assert_abs_diff_eq!(post.gamma[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(post.xi_at(0, 1, 1), 1.0, epsilon = 1e-12);
        // On ordinary inputs both recursions agree.
        let mut rng = crate::seed::rng(5);
        for _ in 0..20 {
            let phi = vec![
                random_simplex(&mut rng, 3),
                random_simplex(&mut rng, 3),
                random_simplex(&mut rng, 3),
            ];
            let p = chain(random_simplex(&mut rng, 3), vec![phi.clone(), phi]);
            let like: Vec<f64> = (0..9).map(|_| -20.0 * rng.random::<f64>()).collect();
            let a = scaled(&p, &like).unwrap().unwrap();
            let b = log_space(&p, &like).unwrap();
            assert_abs_diff_eq!(a.loglik, b.loglik, epsilon = 1e-10);
            for (x, y) in a.gamma.iter().chain(&a.xi).zip(b.gamma.iter().chain(&b.xi)) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn scaled_recursion_matches_unscaled() {
        // Direct probability-space recursion on a tiny instance.
        let mut rng = crate::seed::rng(11);
        for _ in 0..20 {
            let theta = random_simplex(&mut rng, 2);
            let phi = vec![random_simplex(&mut rng, 2), random_simplex(&mut rng, 2)];
            let p = chain(theta.clone(), vec![phi.clone()]);
            let e: Vec<f64> = (0..4).map(|_| 1e-3 + rng.random::<f64>()).collect();
            let like: Vec<f64> = e.iter().map(|v| v.ln()).collect();
            let a0 = [theta[0] * e[0], theta[1] * e[1]];
            let a1: Vec<f64> = (0..2)
                .map(|k| e[2 + k] * (a0[0] * phi[0][k] + a0[1] * phi[1][k]))
                .collect();
            let b0: Vec<f64> = (0..2)
                .map(|k| phi[k][0] * e[2] + phi[k][1] * e[3])
                .collect();
            let z = a1[0] + a1[1];
            let post = forward_backward(&p, &like).unwrap();
            assert!((post.loglik - z.ln()).abs() < 1e-10);
            for k in 0..2 {
                assert!((post.gamma[k] - a0[k] * b0[k] / z).abs() < 1e-10);
                assert!((post.gamma[2 + k] - a1[k] / z).abs() < 1e-10);
                for k2 in 0..2 {
                    let want = a0[k] * phi[k][k2] * e[2 + k2] / z;
                    assert!((post.xi_at(0, k, k2) - want).abs() < 1e-10);
                }
            }
        }
    }
}
