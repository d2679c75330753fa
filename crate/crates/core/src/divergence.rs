//! Gaussian kernel, weighted MMD², its gradient, the pairwise environment penalty and TV distance.
//!
//! All MMD values are biased V-statistics over weight-normalized empirical measures, so they are
//! nonnegative up to rounding. With normalized weights `α`, `β` over a pooled sample and kernel
//! matrix `K`, `MMD² = (α − β)ᵀ K (α − β)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{euclidean, median, sq_dist, Matrix};

/// Bandwidth used when the median heuristic has no nonzero distance to work with.
pub const FALLBACK_BANDWIDTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    Fixed,
    MedianHeuristic,
}

/// How per-pair discrepancies enter the environment penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdForm {
    #[default]
    Squared,
    Root,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// σ; used only under [`BandwidthRule::Fixed`].
    pub bandwidth: f64,
    pub bandwidth_rule: BandwidthRule,
    #[serde(default)]
    pub form: MmdForm,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            bandwidth_rule: BandwidthRule::MedianHeuristic,
            form: MmdForm::Squared,
        }
    }
}

impl KernelConfig {
    pub fn fixed(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            bandwidth_rule: BandwidthRule::Fixed,
            form: MmdForm::Squared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_rule == BandwidthRule::Fixed
            && !(self.bandwidth > 0.0 && self.bandwidth.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "kernel bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    /// σ for a sample: the fixed value, or the median heuristic over `points`.
    pub fn resolve(&self, points: &[Vec<f64>]) -> f64 {
        match self.bandwidth_rule {
            BandwidthRule::Fixed => self.bandwidth,
            BandwidthRule::MedianHeuristic => median_bandwidth(points),
        }
    }
}

/// Weighted empirical measure. Scalars are stored as length-1 vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSampleSet {
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl EnvSampleSet {
    pub fn new(values: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        Self { values, weights }
    }

    pub fn scalars(values: &[f64], weights: Vec<f64>) -> Self {
        Self::new(values.iter().map(|&v| vec![v]).collect(), weights)
    }

    pub fn unweighted(values: Vec<Vec<f64>>) -> Self {
        let n = values.len();
        Self::new(values, vec![1.0; n])
    }

    fn total_weight(&self) -> Result<f64> {
        check_dim("sample weights", self.values.len(), self.weights.len())?;
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("sample weights must be finite and nonnegative".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if s > 0.0 {
            Ok(s)
        } else {
            Err(Error::ZeroMass("environment sample set"))
        }
    }

    fn value_dim(&self) -> Option<usize> {
        self.values.first().map(Vec::len)
    }
}

/// `exp(−‖z − z'‖² / (2σ²))`.
pub fn gaussian_kernel(z: &[f64], z2: &[f64], sigma: f64) -> f64 {
    (-sq_dist(z, z2) / (2.0 * sigma * sigma)).exp()
}

/// Median of the nonzero pairwise Euclidean distances, or [`FALLBACK_BANDWIDTH`].
pub fn median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let v = euclidean(&points[i], &points[j]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    median(&mut d).unwrap_or(FALLBACK_BANDWIDTH)
}

fn pooled(a: &EnvSampleSet, b: &EnvSampleSet) -> Vec<Vec<f64>> {
    a.values.iter().chain(&b.values).cloned().collect()
}

fn check_value_dims(a: &EnvSampleSet, b: &EnvSampleSet) -> Result<()> {
    let d = a.value_dim().or(b.value_dim()).unwrap_or(0);
    for v in a.values.iter().chain(&b.values) {
        check_dim("sample value", d, v.len())?;
    }
    Ok(())
}

/// Weighted biased MMD² between two sample sets. The median rule pools both sets.
pub fn mmd2_weighted(a: &EnvSampleSet, b: &EnvSampleSet, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    let sigma = cfg.resolve(&pooled(a, b));
    mmd2_weighted_with(a, b, sigma)
}

/// [`mmd2_weighted`] at an explicit bandwidth.
pub fn mmd2_weighted_with(a: &EnvSampleSet, b: &EnvSampleSet, sigma: f64) -> Result<f64> {
    let sa = a.total_weight()?;
    let sb = b.total_weight()?;
    check_value_dims(a, b)?;
    let term = |x: &EnvSampleSet, sx: f64, y: &EnvSampleSet, sy: f64| {
        let mut acc = 0.0;
        for (vi, wi) in x.values.iter().zip(&x.weights) {
            for (vj, wj) in y.values.iter().zip(&y.weights) {
                acc += wi * wj * gaussian_kernel(vi, vj, sigma);
            }
        }
        acc / (sx * sy)
    };
    Ok(term(a, sa, a, sa) + term(b, sb, b, sb) - 2.0 * term(a, sa, b, sb))
}

/// Partial derivatives of MMD² with respect to every sample value and weight, at fixed σ.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdGrad {
    pub value: f64,
    pub d_values_a: Vec<Vec<f64>>,
    pub d_values_b: Vec<Vec<f64>>,
    pub d_weights_a: Vec<f64>,
    pub d_weights_b: Vec<f64>,
}

/// Gradient of [`mmd2_weighted`], holding the (possibly median-derived) bandwidth constant.
pub fn mmd2_grad(a: &EnvSampleSet, b: &EnvSampleSet, cfg: &KernelConfig) -> Result<MmdGrad> {
    cfg.validate()?;
    let sigma = cfg.resolve(&pooled(a, b));
    mmd2_grad_with(a, b, sigma)
}

pub fn mmd2_grad_with(a: &EnvSampleSet, b: &EnvSampleSet, sigma: f64) -> Result<MmdGrad> {
    let sa = a.total_weight()?;
    let sb = b.total_weight()?;
    check_value_dims(a, b)?;
    let values = pooled(a, b);
    let na = a.values.len();
    let n = values.len();
    // δ over the pooled sample: +α on a's slots, −β on b's.
    let delta: Vec<f64> = a
        .weights
        .iter()
        .map(|w| w / sa)
        .chain(b.weights.iter().map(|w| -w / sb))
        .collect();
    let k = Matrix::from_fn(n, n, |i, j| gaussian_kernel(&values[i], &values[j], sigma));
    let k_delta = k.matvec(&delta)?;
    let value: f64 = delta.iter().zip(&k_delta).map(|(d, kd)| d * kd).sum();

    let inv_s2 = 1.0 / (sigma * sigma);
    let mut d_values = vec![vec![0.0; values.first().map_or(0, Vec::len)]; n];
    for i in 0..n {
        for j in 0..n {
            let c = -2.0 * inv_s2 * delta[i] * delta[j] * k.get(i, j);
            if c == 0.0 {
                continue;
            }
            for (g, (vi, vj)) in d_values[i].iter_mut().zip(values[i].iter().zip(&values[j])) {
                *g += c * (vi - vj);
            }
        }
    }
    let alpha_kd: f64 = (0..na).map(|i| delta[i] * k_delta[i]).sum();
    let beta_kd: f64 = (na..n).map(|i| -delta[i] * k_delta[i]).sum();
    let d_weights_a = (0..na).map(|i| 2.0 / sa * (k_delta[i] - alpha_kd)).collect();
    let d_weights_b = (na..n).map(|i| -2.0 / sb * (k_delta[i] - beta_kd)).collect();
    let d_values_b = d_values.split_off(na);
    Ok(MmdGrad {
        value,
        d_values_a: d_values,
        d_values_b,
        d_weights_a,
        d_weights_b,
    })
}

/// Chain rule through caller-supplied Jacobians: `jac_a[i]` is `∂ value_i / ∂θ`
/// (`value_dim × n_params`). Weights are treated as constants.
pub fn mmd2_grad_upstream(
    a: &EnvSampleSet,
    b: &EnvSampleSet,
    cfg: &KernelConfig,
    jac_a: &[Matrix],
    jac_b: &[Matrix],
) -> Result<Vec<f64>> {
    check_dim("jacobians for set a", a.values.len(), jac_a.len())?;
    check_dim("jacobians for set b", b.values.len(), jac_b.len())?;
    let g = mmd2_grad(a, b, cfg)?;
    let n_params = jac_a.iter().chain(jac_b).next().map_or(0, Matrix::cols);
    let mut out = vec![0.0; n_params];
    for (dv, jac) in g.d_values_a.iter().zip(jac_a).chain(g.d_values_b.iter().zip(jac_b)) {
        check_dim("jacobian columns", n_params, jac.cols())?;
        for (p, o) in jac.t_matvec(dv)?.into_iter().zip(out.iter_mut()) {
            *o += p;
        }
    }
    Ok(out)
}

/// Sum over unordered pairs `m < m'` of the per-pair discrepancy (MMD² or MMD per `cfg.form`).
/// The median rule pools all environments.
pub fn pairwise_mmd_penalty(envs: &[EnvSampleSet], cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    if envs.len() < 2 {
        return Ok(0.0);
    }
    let all: Vec<Vec<f64>> = envs.iter().flat_map(|e| e.values.iter().cloned()).collect();
    let sigma = cfg.resolve(&all);
    let mut total = 0.0;
    for m in 0..envs.len() {
        for m2 in m + 1..envs.len() {
            let d = mmd2_weighted_with(&envs[m], &envs[m2], sigma)?;
            total += match cfg.form {
                MmdForm::Squared => d,
                MmdForm::Root => d.max(0.0).sqrt(),
            };
        }
    }
    Ok(total)
}

/// Penalty over environments that share one pooled sample and differ only in weights, as produced
/// by soft environment membership. Holds the kernel matrix for reuse by the gradient.
#[derive(Debug, Clone)]
pub struct SharedSamplePenalty {
    pub sigma: f64,
    pub value: f64,
    /// `∂ penalty / ∂ values[i]`.
    pub d_values: Vec<Vec<f64>>,
    /// `∂ penalty / ∂ weights[i][k]`, `B × K`.
    pub d_weights: Matrix,
    /// Kernel evaluations performed (one per entry of the `B × B` matrix).
    pub kernel_evals: usize,
}

/// Evaluate the pairwise penalty and its gradient for `K` environments whose `i`-th sample is
/// `values[i]` with membership weight `weights[i][k]`. Pairs where either environment has zero
/// mass are skipped.
pub fn shared_sample_penalty(
    values: &[Vec<f64>],
    weights: &Matrix,
    sigma: f64,
    form: MmdForm,
) -> Result<SharedSamplePenalty> {
    let n = values.len();
    check_dim("membership rows", n, weights.rows())?;
    let kk = weights.cols();
    let dim = values.first().map_or(0, Vec::len);
    for v in values {
        check_dim("sample value", dim, v.len())?;
    }
    let kernel = Matrix::from_fn(n, n, |i, j| gaussian_kernel(&values[i], &values[j], sigma));
    let kernel_evals = n * n;

    let mass: Vec<f64> = (0..kk).map(|k| (0..n).map(|i| weights.get(i, k)).sum()).collect();
    let alpha: Vec<Vec<f64>> = (0..kk)
        .map(|k| (0..n).map(|i| if mass[k] > 0.0 { weights.get(i, k) / mass[k] } else { 0.0 }).collect())
        .collect();

    let mut value = 0.0;
    let mut d_values = vec![vec![0.0; dim]; n];
    let mut d_weights = Matrix::zeros(n, kk);
    let inv_s2 = 1.0 / (sigma * sigma);
    for m in 0..kk {
        for m2 in m + 1..kk {
            if mass[m] <= 0.0 || mass[m2] <= 0.0 {
                continue;
            }
            let delta: Vec<f64> = (0..n).map(|i| alpha[m][i] - alpha[m2][i]).collect();
            let kd = kernel.matvec(&delta)?;
            let d2: f64 = delta.iter().zip(&kd).map(|(a, b)| a * b).sum();
            let (pair_value, outer) = match form {
                MmdForm::Squared => (d2, 1.0),
                MmdForm::Root => {
                    let r = d2.max(0.0).sqrt();
                    // The root is not differentiable at zero discrepancy; take the zero subgradient.
                    (r, if r > 1e-12 { 0.5 / r } else { 0.0 })
                }
            };
            value += pair_value;
            if outer == 0.0 {
                continue;
            }
            for i in 0..n {
                if delta[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let c = -2.0 * inv_s2 * delta[i] * delta[j] * kernel.get(i, j) * outer;
                    if c == 0.0 {
                        continue;
                    }
                    for (g, (vi, vj)) in d_values[i].iter_mut().zip(values[i].iter().zip(&values[j])) {
                        *g += c * (vi - vj);
                    }
                }
            }
            let a_kd: f64 = alpha[m].iter().zip(&kd).map(|(a, b)| a * b).sum();
            let b_kd: f64 = alpha[m2].iter().zip(&kd).map(|(a, b)| a * b).sum();
            for (i, &k) in kd.iter().enumerate() {
                let ga = 2.0 / mass[m] * (k - a_kd) * outer;
                let gb = -2.0 / mass[m2] * (k - b_kd) * outer;
                d_weights.set(i, m, d_weights.get(i, m) + ga);
                d_weights.set(i, m2, d_weights.get(i, m2) + gb);
            }
        }
    }
    Ok(SharedSamplePenalty {
        sigma,
        value,
        d_values,
        d_weights,
        kernel_evals,
    })
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dim("probability vector", p.len(), q.len())?;
    for v in [p, q] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 || v.iter().any(|x| *x < -1e-12 || !x.is_finite()) {
            return Err(Error::InvalidTable(format!("vector does not sum to 1 (sum {s})")));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
