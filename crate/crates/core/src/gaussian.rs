//! Multivariate normal numerics.
//!
//! Besides density, sampling and conditioning, this module estimates
//! orthant probabilities `P(x_G > 0, x_L < 0)`: the probability a Gaussian
//! emission assigns to a binary enrollment pattern with `G` the enrolled
//! and `L` the non-enrolled courses. The Monte-Carlo estimator samples the
//! `G` block from its marginal and weights each all-positive draw by the
//! conditional probability that the `L` block is negative.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_REGULARIZATION: f64 = 1e-4;

/// Inner draws per accepted outer sample in [`TailMode::NestedMc`].
pub const DEFAULT_INNER_SAMPLES: usize = 32;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

// ---------------------------------------------------------------------------
// Univariate helpers

/// Standard normal CDF, `0.5 * erfc(-x / sqrt 2)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

/// Inverse standard normal CDF. Rational initial guess refined by one
/// Halley step against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.02425;
    let x = if p < LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley step; work in the smaller tail for relative accuracy.
    let e = if x < 0.0 {
        normal_cdf(x) - p
    } else {
        (1.0 - p) - normal_cdf(-x)
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

// ---------------------------------------------------------------------------
// Parameters

/// Mean and covariance of a multivariate normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MvnRepr", into = "MvnRepr")]
pub struct MvnParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct MvnRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<MvnRepr> for MvnParams {
    type Error = Error;

    fn try_from(r: MvnRepr) -> Result<Self> {
        let m = r.mean.len();
        if r.cov.len() != m || r.cov.iter().any(|row| row.len() != m) {
            return Err(Error::shape("covariance rows do not match mean length"));
        }
        let cov = DMatrix::from_fn(m, m, |i, j| r.cov[i][j]);
        MvnParams::new(DVector::from_vec(r.mean), cov)
    }
}

impl From<MvnParams> for MvnRepr {
    fn from(p: MvnParams) -> Self {
        let m = p.dim();
        MvnRepr {
            mean: p.mean.iter().copied().collect(),
            cov: (0..m)
                .map(|i| (0..m).map(|j| p.cov[(i, j)]).collect())
                .collect(),
        }
    }
}

impl MvnParams {
    /// Checks shape and symmetry; positive definiteness is checked on
    /// factorization.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::shape(format!(
                "mean has length {m}, covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..m {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::invalid(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian parameter"));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(m: usize) -> Self {
        Self {
            mean: DVector::zeros(m),
            cov: DMatrix::identity(m, m),
        }
    }

    pub fn from_slices(mean: &[f64], cov_rows: &[&[f64]]) -> Result<Self> {
        let m = mean.len();
        if cov_rows.len() != m || cov_rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("covariance rows do not match mean length"));
        }
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_fn(m, m, |i, j| cov_rows[i][j]),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn factorize(&self) -> Result<MvnFactor> {
        MvnFactor::new(self)
    }

    pub fn sd(&self, j: usize) -> f64 {
        self.cov[(j, j)].sqrt()
    }

    /// Marginal over `idx`, in the given order.
    pub fn marginal(&self, idx: &[usize]) -> Result<MvnParams> {
        check_indices(idx, self.dim())?;
        Ok(MvnParams {
            mean: DVector::from_fn(idx.len(), |i, _| self.mean[idx[i]]),
            cov: self.cov.select_rows(idx).select_columns(idx),
        })
    }
}

fn check_indices(idx: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    for &i in idx {
        if i >= m {
            return Err(Error::shape(format!(
                "index {i} out of range for dimension {m}"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("index {i} repeated")));
        }
    }
    Ok(())
}

fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
        .ok_or_else(|| Error::NotPositiveDefinite(format!(" ({}x{} matrix)", a.nrows(), a.ncols())))
}

/// Symmetrizes `(A + A^T) / 2` and adds `epsilon * I`.
pub fn regularize_cov(cov: &DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
    let mut out = (cov + cov.transpose()) * 0.5;
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] += epsilon;
    }
    out
}

/// Cached lower Cholesky factor for repeated density evaluation and
/// sampling.
#[derive(Clone, Debug)]
pub struct MvnFactor {
    mean: DVector<f64>,
    lower: DMatrix<f64>,
    half_log_det: f64,
}

impl MvnFactor {
    pub fn new(p: &MvnParams) -> Result<Self> {
        let lower = cholesky(&p.cov)?.unpack();
        let half_log_det = lower.diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self {
            mean: p.mean.clone(),
            lower,
            half_log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let m = self.dim();
        debug_assert_eq!(x.len(), m);
        // Forward substitution L z = x - mu.
        let mut z = vec![0.0; m];
        let mut quad = 0.0;
        for i in 0..m {
            let mut s = x[i] - self.mean[i];
            for (k, zk) in z.iter().enumerate().take(i) {
                s -= self.lower[(i, k)] * zk;
            }
            z[i] = s / self.lower[(i, i)];
            quad += z[i] * z[i];
        }
        -0.5 * quad - self.half_log_det - 0.5 * m as f64 * LN_2PI
    }

    /// Writes `mean + L eps` into `out`, drawing `eps` from `rng`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, eps: &mut [f64], out: &mut [f64]) {
        let m = self.dim();
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        for i in 0..m {
            let mut s = self.mean[i];
            for k in 0..=i {
                s += self.lower[(i, k)] * eps[k];
            }
            out[i] = s;
        }
    }
}

/// Exact log density via Cholesky factorization.
pub fn logpdf(x: &[f64], p: &MvnParams) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::shape(format!(
            "point has length {}, expected {}",
            x.len(),
            p.dim()
        )));
    }
    Ok(p.factorize()?.logpdf(x))
}

/// `n` draws from `p`, deterministic per seed.
pub fn sample_mvn(p: &MvnParams, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let f = p.factorize()?;
    let mut rng = seed::rng(seed);
    let m = p.dim();
    let mut eps = vec![0.0; m];
    Ok((0..n)
        .map(|_| {
            let mut out = vec![0.0; m];
            f.sample_into(&mut rng, &mut eps, &mut out);
            out
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Conditioning

/// Precomputed split of a Gaussian into an observed block `G` and the
/// remaining block `L` (ascending order), with the regression of `L` on `G`.
#[derive(Clone, Debug)]
pub struct Conditional {
    pub g: Vec<usize>,
    pub l: Vec<usize>,
    mean_g: DVector<f64>,
    cov_g: DMatrix<f64>,
    mean_l: DVector<f64>,
    /// `Sigma_LG Sigma_GG^{-1}`.
    regress: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
}

impl Conditional {
    pub fn new(p: &MvnParams, g: &[usize]) -> Result<Self> {
        check_indices(g, p.dim())?;
        let mut in_g = vec![false; p.dim()];
        for &i in g {
            in_g[i] = true;
        }
        let l: Vec<usize> = (0..p.dim()).filter(|&i| !in_g[i]).collect();
        let cov_g = p.cov.select_rows(g).select_columns(g);
        let cov_lg = p.cov.select_rows(&l).select_columns(g);
        let cov_ll = p.cov.select_rows(&l).select_columns(&l);
        let regress = if g.is_empty() {
            DMatrix::zeros(l.len(), 0)
        } else {
            let chol = cholesky(&cov_g)?;
            chol.solve(&cov_lg.transpose()).transpose()
        };
        let cond = &cov_ll - &regress * cov_lg.transpose();
        let cond_cov = (&cond + cond.transpose()) * 0.5;
        Ok(Self {
            g: g.to_vec(),
            mean_g: DVector::from_fn(g.len(), |i, _| p.mean[g[i]]),
            mean_l: DVector::from_fn(l.len(), |i, _| p.mean[l[i]]),
            l,
            cov_g,
            regress,
            cond_cov,
        })
    }

    pub fn marginal_g(&self) -> MvnParams {
        MvnParams {
            mean: self.mean_g.clone(),
            cov: self.cov_g.clone(),
        }
    }

    pub fn regression(&self) -> &DMatrix<f64> {
        &self.regress
    }

    pub fn cond_cov(&self) -> &DMatrix<f64> {
        &self.cond_cov
    }

    /// `mu_L + B (y - mu_G)`.
    pub fn cond_mean(&self, y: &[f64]) -> DVector<f64> {
        let mut out = self.mean_l.clone();
        for r in 0..self.l.len() {
            let mut s = 0.0;
            for c in 0..self.g.len() {
                s += self.regress[(r, c)] * (y[c] - self.mean_g[c]);
            }
            out[r] += s;
        }
        out
    }

    pub fn conditioned(&self, y: &[f64]) -> MvnParams {
        MvnParams {
            mean: self.cond_mean(y),
            cov: self.cond_cov.clone(),
        }
    }

    /// Conditional standard deviations of the `L` block; errors on a zero
    /// variance.
    pub fn cond_sd(&self) -> Result<Vec<f64>> {
        (0..self.l.len())
            .map(|j| {
                let v = self.cond_cov[(j, j)];
                if v > 0.0 {
                    Ok(v.sqrt())
                } else {
                    Err(Error::Numerical(format!(
                        "conditional variance of coordinate {} is {v}",
                        self.l[j]
                    )))
                }
            })
            .collect()
    }
}

/// Conditional distribution of the coordinates not in `observed_idx`,
/// given `x[observed_idx] = observed_vals`.
pub fn condition(
    p: &MvnParams,
    observed_idx: &[usize],
    observed_vals: &[f64],
) -> Result<MvnParams> {
    if observed_idx.len() != observed_vals.len() {
        return Err(Error::shape("observed index and value lengths differ"));
    }
    if observed_idx.len() >= p.dim() {
        return Err(Error::invalid(
            "at least one coordinate must remain unobserved",
        ));
    }
    Ok(Conditional::new(p, observed_idx)?.conditioned(observed_vals))
}

// ---------------------------------------------------------------------------
// Orthant probabilities

/// A binary enrollment pattern; `1` coordinates form `G`, `0` form `L`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinaryPattern {
    pub bits: Vec<u8>,
}

impl BinaryPattern {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("pattern entries must be 0/1"));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn positive(&self) -> Vec<usize> {
        (0..self.bits.len())
            .filter(|&j| self.bits[j] == 1)
            .collect()
    }

    pub fn negative(&self) -> Vec<usize> {
        (0..self.bits.len())
            .filter(|&j| self.bits[j] == 0)
            .collect()
    }

    /// Every pattern of length `m` in counting order.
    pub fn all(m: usize) -> impl Iterator<Item = BinaryPattern> {
        (0..1usize << m).map(move |code| BinaryPattern {
            bits: (0..m).map(|j| ((code >> j) & 1) as u8).collect(),
        })
    }
}

/// Monte-Carlo probability with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbEstimate {
    pub value: f64,
    pub std_error: f64,
    pub sample_count: usize,
}

impl ProbEstimate {
    /// `value +- z * std_error`, clamped to `[0, 1]`.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (
            (self.value - z * self.std_error).max(0.0),
            (self.value + z * self.std_error).min(1.0),
        )
    }

    pub(crate) fn from_weights(weights: &[f64]) -> Self {
        let k = weights.len();
        let mean = weights.iter().sum::<f64>() / k as f64;
        let std_error = if k > 1 {
            let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        } else {
            0.0
        };
        Self {
            value: mean,
            std_error,
            sample_count: k,
        }
    }
}

/// How the estimator weights an all-positive draw of the `G` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Product of univariate conditional CDFs; cheap, biased under
    /// correlation within `L`.
    ProductCdf,
    /// Inner Monte-Carlo over the exact conditional normal; unbiased.
    NestedMc,
}

/// Orthant estimator with a reusable conditional split.
#[derive(Clone, Debug)]
pub struct OrthantEstimator {
    cond: Conditional,
    g_factor: Option<MvnFactor>,
    l_lower: Option<DMatrix<f64>>,
    l_sd: Vec<f64>,
    tail: TailMode,
    inner: usize,
}

impl OrthantEstimator {
    pub fn new(
        p: &MvnParams,
        pattern: &BinaryPattern,
        tail: TailMode,
        inner: usize,
    ) -> Result<Self> {
        if pattern.len() != p.dim() {
            return Err(Error::shape(format!(
                "pattern has length {}, distribution has dimension {}",
                pattern.len(),
                p.dim()
            )));
        }
        let cond = Conditional::new(p, &pattern.positive())?;
        let g_factor = if cond.g.is_empty() {
            None
        } else {
            Some(cond.marginal_g().factorize()?)
        };
        let (l_lower, l_sd) = match (cond.l.is_empty(), tail) {
            (true, _) => (None, Vec::new()),
            (false, TailMode::ProductCdf) => (None, cond.cond_sd()?),
            (false, TailMode::NestedMc) => (Some(cholesky(cond.cond_cov())?.unpack()), Vec::new()),
        };
        Ok(Self {
            cond,
            g_factor,
            l_lower,
            l_sd,
            tail,
            inner: inner.max(1),
        })
    }

    /// Weight of one outer draw: `P(x_L < 0 | x_G = y)` estimate times the
    /// indicator `y > 0`.
    fn weight<R: Rng + ?Sized>(&self, y: &[f64], rng: &mut R, scratch: &mut Scratch) -> f64 {
        if y.iter().any(|&v| v <= 0.0) {
            return 0.0;
        }
        if self.cond.l.is_empty() {
            return 1.0;
        }
        let mu = self.cond.cond_mean(y);
        match self.tail {
            TailMode::ProductCdf => mu
                .iter()
                .zip(&self.l_sd)
                .map(|(m, s)| normal_cdf(-m / s))
                .product(),
            TailMode::NestedMc => {
                let lower = self
                    .l_lower
                    .as_ref()
                    .expect("factor present in nested mode");
                let nl = mu.len();
                let mut hits = 0usize;
                for _ in 0..self.inner {
                    for e in scratch.eps_l.iter_mut() {
                        *e = rng.sample(StandardNormal);
                    }
                    let all_negative = (0..nl).all(|i| {
                        let mut v = mu[i];
                        for k in 0..=i {
                            v += lower[(i, k)] * scratch.eps_l[k];
                        }
                        v < 0.0
                    });
                    hits += usize::from(all_negative);
                }
                hits as f64 / self.inner as f64
            }
        }
    }

    /// Mean and standard error over `k_mc` outer draws.
    pub fn estimate(&self, k_mc: usize, seed: u64) -> Result<ProbEstimate> {
        if k_mc == 0 {
            return Err(Error::invalid("Monte-Carlo sample count must be positive"));
        }
        let mut rng = seed::rng(seed);
        let ng = self.cond.g.len();
        let mut scratch = Scratch {
            eps_g: vec![0.0; ng],
            eps_l: vec![0.0; self.cond.l.len()],
        };
        let mut y = vec![0.0; ng];
        let mut weights = Vec::with_capacity(k_mc);
        for _ in 0..k_mc {
            if let Some(f) = &self.g_factor {
                f.sample_into(&mut rng, &mut scratch.eps_g, &mut y);
            }
            weights.push(self.weight(&y, &mut rng, &mut scratch));
        }
        Ok(ProbEstimate::from_weights(&weights))
    }
}

struct Scratch {
    eps_g: Vec<f64>,
    eps_l: Vec<f64>,
}

/// Monte-Carlo estimate of `P(x_G > 0, x_L < 0)`.
///
/// With `G` empty every outer draw is accepted and weighted by the tail
/// probability of the full vector; with `L` empty the estimate is the
/// fraction of all-positive draws.
pub fn orthant_prob_mc(
    p: &MvnParams,
    pattern: &BinaryPattern,
    k_mc: usize,
    seed: u64,
    tail: TailMode,
) -> Result<ProbEstimate> {
    orthant_prob_mc_with_inner(p, pattern, k_mc, seed, tail, DEFAULT_INNER_SAMPLES)
}

pub fn orthant_prob_mc_with_inner(
    p: &MvnParams,
    pattern: &BinaryPattern,
    k_mc: usize,
    seed: u64,
    tail: TailMode,
    inner: usize,
) -> Result<ProbEstimate> {
    if k_mc == 0 {
        return Err(Error::invalid("Monte-Carlo sample count must be positive"));
    }
    OrthantEstimator::new(p, pattern, tail, inner)?.estimate(k_mc, seed)
}

/// Smoothed reward for a draw `y` of the `G` block:
/// `prod_{j in L} Phi(-mu_j(y) / sigma_j) * (#{y_j > 0} / |G|)`.
/// The count factor is 1 when `G` is empty.
pub fn smoothed_orthant_reward(y: &[f64], p: &MvnParams, pattern: &BinaryPattern) -> Result<f64> {
    if pattern.len() != p.dim() {
        return Err(Error::shape("pattern length does not match distribution"));
    }
    let cond = Conditional::new(p, &pattern.positive())?;
    smoothed_reward_with(&cond, &cond.cond_sd()?, y)
}

pub(crate) fn smoothed_reward_with(cond: &Conditional, sd: &[f64], y: &[f64]) -> Result<f64> {
    if y.len() != cond.g.len() {
        return Err(Error::shape(format!(
            "draw has length {}, expected |G| = {}",
            y.len(),
            cond.g.len()
        )));
    }
    let soft = if y.is_empty() {
        1.0
    } else {
        y.iter().filter(|&&v| v > 0.0).count() as f64 / y.len() as f64
    };
    let mu = cond.cond_mean(y);
    let tail: f64 = mu.iter().zip(sd).map(|(m, s)| normal_cdf(-m / s)).product();
    Ok(tail * soft)
}

// ---------------------------------------------------------------------------
// Quadrature oracle

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Deterministic orthant probability for `m <= 4`.
///
/// The sign-flipped vector `z = D x` is whitened by its Cholesky factor and
/// integrated variable by variable; each successive lower limit depends on
/// the earlier whitened coordinates. Mapping each truncated coordinate to
/// the unit interval leaves an `(m - 1)`-dimensional smooth integral over
/// the cube, evaluated by tensor-product Gauss-Legendre rules on a
/// polynomial endpoint-smoothing map. The grid doubles until successive
/// estimates differ by less than `1e-7`.
pub fn orthant_prob_exact_small(p: &MvnParams, pattern: &BinaryPattern) -> Result<f64> {
    let m = p.dim();
    if m > 4 {
        return Err(Error::invalid(format!(
            "quadrature oracle supports m <= 4, got {m}"
        )));
    }
    if pattern.len() != m {
        return Err(Error::shape("pattern length does not match distribution"));
    }
    if m == 0 {
        return Ok(1.0);
    }
    let sign: Vec<f64> = pattern
        .bits
        .iter()
        .map(|&b| if b == 1 { 1.0 } else { -1.0 })
        .collect();
    let shift: Vec<f64> = (0..m).map(|i| sign[i] * p.mean[i]).collect();
    let flipped = DMatrix::from_fn(m, m, |i, j| sign[i] * sign[j] * p.cov[(i, j)]);
    let c = cholesky(&flipped)?.unpack();

    // Mass of coordinate i above its lower limit given earlier whitened w.
    let tail_mass = |i: usize, w: &[f64]| -> f64 {
        let mut s = shift[i];
        for (k, wk) in w.iter().enumerate().take(i) {
            s += c[(i, k)] * wk;
        }
        normal_cdf(s / c[(i, i)])
    };
    if m == 1 {
        return Ok(tail_mass(0, &[]));
    }

    let dims = m - 1;
    let integrate = |n: usize| -> f64 {
        let (x, wt) = gauss_legendre_unit(n);
        // u = v^2 (3 - 2v) flattens both endpoints.
        let u: Vec<f64> = x.iter().map(|v| v * v * (3.0 - 2.0 * v)).collect();
        let du: Vec<f64> = x
            .iter()
            .zip(&wt)
            .map(|(v, w)| 6.0 * v * (1.0 - v) * w)
            .collect();
        let mut total = 0.0;
        let mut idx = vec![0usize; dims];
        let mut w = vec![0.0; m];
        loop {
            let mut weight = 1.0;
            let mut val = 1.0;
            for d in 0..dims {
                let e = tail_mass(d, &w[..d]);
                val *= e;
                weight *= du[idx[d]];
                let q = (e * (1.0 - u[idx[d]])).max(f64::MIN_POSITIVE);
                w[d] = -normal_quantile(q);
            }
            val *= tail_mass(dims, &w[..dims]);
            total += weight * val;

            let mut d = dims;
            loop {
                if d == 0 {
                    return total;
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
            }
        }
    };

    let max_n = match dims {
        1 => 4096,
        2 => 512,
        _ => 128,
    };
    let mut n = 8;
    let mut prev = integrate(n);
    while n < max_n {
        n *= 2;
        let cur = integrate(n);
        if (cur - prev).abs() < 1e-7 {
            return Ok(cur.clamp(0.0, 1.0));
        }
        prev = cur;
    }
    log::debug!("orthant quadrature stopped at grid {n} without reaching 1e-7");
    Ok(prev.clamp(0.0, 1.0))
}
