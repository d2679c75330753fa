//! Differentiable policies over a finite action set.
//!
//! Every policy scores action `y` in context `x = (E, X_rest)` as
//!
//! ```text
//! s(y|x) = w_E · f_E(y, E) + w_rest · f_rest(y, X_rest) + b  [+ head_y · tanh(W [E; X_rest])]
//! ```
//!
//! with `f_E(y, E) = E ⊙ env_item[y]` and `f_rest(y, X_rest) = X_rest ⊙ rest_item[y]`, and
//! normalizes with a log-softmax over actions. The bracketed term is present only for the
//! shallow nonlinear family. The spurious/causal split is kept explicit so the weight on the
//! environment features can be tracked during training.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, log_sum_exp, Matrix};
use crate::rng;

/// Hidden width used by [`init_policy`] for the nonlinear family.
pub const DEFAULT_HIDDEN_DIM: usize = 8;

/// Shapes of the feature maps plus the per-action attribute tables they read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub env_dim: usize,
    pub rest_dim: usize,
    pub action_count: usize,
    /// `action_count × env_dim`; row `y` multiplies the environment features.
    pub env_item: Matrix,
    /// `action_count × rest_dim`; row `y` multiplies the task features.
    pub rest_item: Matrix,
}

impl FeatureSpec {
    pub fn new(env_item: Matrix, rest_item: Matrix) -> Result<Self> {
        let spec = Self {
            env_dim: env_item.cols(),
            rest_dim: rest_item.cols(),
            action_count: env_item.rows(),
            env_item,
            rest_item,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// All attribute tables set to one: every action sees the same features.
    pub fn symmetric(env_dim: usize, rest_dim: usize, action_count: usize) -> Result<Self> {
        Self::new(
            Matrix::from_fn(action_count, env_dim, |_, _| 1.0),
            Matrix::from_fn(action_count, rest_dim, |_, _| 1.0),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.env_dim + self.rest_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.env_dim < 1 || self.rest_dim < 1 || self.action_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "feature spec needs env_dim >= 1, rest_dim >= 1, action_count >= 2 (got {}, {}, {})",
                self.env_dim, self.rest_dim, self.action_count
            )));
        }
        check_dim("env_item rows", self.action_count, self.env_item.rows())?;
        check_dim("env_item cols", self.env_dim, self.env_item.cols())?;
        check_dim("rest_item rows", self.action_count, self.rest_item.rows())?;
        check_dim("rest_item cols", self.rest_dim, self.rest_item.cols())?;
        if !self
            .env_item
            .as_slice()
            .iter()
            .chain(self.rest_item.as_slice())
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidConfig("non-finite item attribute".into()));
        }
        Ok(())
    }

    pub fn check_action(&self, y: usize) -> Result<()> {
        if y < self.action_count {
            Ok(())
        } else {
            Err(Error::InvalidAction {
                index: y,
                count: self.action_count,
            })
        }
    }

    pub fn check_context(&self, x: &Context) -> Result<()> {
        check_dim("env_features", self.env_dim, x.env_features.len())?;
        check_dim("rest_features", self.rest_dim, x.rest_features.len())
    }

    /// `f_E(y, E)`.
    pub fn env_features_of(&self, x: &Context, y: usize) -> Vec<f64> {
        x.env_features
            .iter()
            .zip(self.env_item.row(y))
            .map(|(e, a)| e * a)
            .collect()
    }

    /// `f_rest(y, X_rest)`.
    pub fn rest_features_of(&self, x: &Context, y: usize) -> Vec<f64> {
        x.rest_features
            .iter()
            .zip(self.rest_item.row(y))
            .map(|(r, a)| r * a)
            .collect()
    }

    /// Largest Euclidean norm of `f_E(y, e)` over the given environment embeddings and all actions.
    pub fn env_feature_bound(&self, env_embeddings: &[Vec<f64>]) -> f64 {
        let mut c: f64 = 0.0;
        for e in env_embeddings {
            for y in 0..self.action_count {
                let n: f64 = e
                    .iter()
                    .zip(self.env_item.row(y))
                    .map(|(a, b)| (a * b) * (a * b))
                    .sum::<f64>()
                    .sqrt();
                c = c.max(n);
            }
        }
        c
    }
}

/// One context `x = (E, X_rest)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub env_features: Vec<f64>,
    pub rest_features: Vec<f64>,
}

impl Context {
    pub fn new(env_features: Vec<f64>, rest_features: Vec<f64>) -> Self {
        Self {
            env_features,
            rest_features,
        }
    }

    /// `[E; X_rest]`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.env_features.len() + self.rest_features.len());
        v.extend_from_slice(&self.env_features);
        v.extend_from_slice(&self.rest_features);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyFamily {
    LogLinear,
    ShallowNonlinear,
}

impl FromStr for PolicyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-linear" => Ok(Self::LogLinear),
            "shallow-nonlinear" => Ok(Self::ShallowNonlinear),
            other => Err(Error::UnknownValue(format!("policy family `{other}`"))),
        }
    }
}

impl fmt::Display for PolicyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LogLinear => "log-linear",
            Self::ShallowNonlinear => "shallow-nonlinear",
        })
    }
}

/// Policy parameters. Serialized field names follow the decomposition (`w_E`, `w_rest`, `b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub family: PolicyFamily,
    pub spec: FeatureSpec,
    #[serde(rename = "w_E")]
    pub w_env: Vec<f64>,
    pub w_rest: Vec<f64>,
    #[serde(rename = "b")]
    pub bias: f64,
    /// `hidden_dim × input_dim`, nonlinear family only.
    #[serde(default)]
    pub hidden: Option<Matrix>,
    /// `action_count × hidden_dim`, nonlinear family only.
    #[serde(default)]
    pub head: Option<Matrix>,
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub w_env: Vec<f64>,
    pub w_rest: Vec<f64>,
    pub bias: f64,
    pub hidden: Option<Matrix>,
    pub head: Option<Matrix>,
}

impl ParamGrad {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Self {
            w_env: vec![0.0; p.w_env.len()],
            w_rest: vec![0.0; p.w_rest.len()],
            bias: 0.0,
            hidden: p.hidden.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            head: p.head.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &ParamGrad, s: f64) {
        axpy(&mut self.w_env, &other.w_env, s);
        axpy(&mut self.w_rest, &other.w_rest, s);
        self.bias += s * other.bias;
        if let (Some(a), Some(b)) = (self.hidden.as_mut(), other.hidden.as_ref()) {
            axpy(a.as_mut_slice(), b.as_slice(), s);
        }
        if let (Some(a), Some(b)) = (self.head.as_mut(), other.head.as_ref()) {
            axpy(a.as_mut_slice(), b.as_slice(), s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w_env.iter_mut().for_each(|v| *v *= s);
        self.w_rest.iter_mut().for_each(|v| *v *= s);
        self.bias *= s;
        for m in [self.hidden.as_mut(), self.head.as_mut()].into_iter().flatten() {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flattened in the order of [`PolicyParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.w_env);
        v.extend_from_slice(&self.w_rest);
        v.push(self.bias);
        for m in [self.hidden.as_ref(), self.head.as_ref()].into_iter().flatten() {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn axpy(y: &mut [f64], x: &[f64], s: f64) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += s * b;
    }
}

/// Forward-pass intermediates for one context.
struct Forward {
    input: Vec<f64>,
    /// Post-activation hidden layer (nonlinear family only).
    activation: Option<Vec<f64>>,
    scores: Vec<f64>,
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        check_dim("w_E", self.spec.env_dim, self.w_env.len())?;
        check_dim("w_rest", self.spec.rest_dim, self.w_rest.len())?;
        match self.family {
            PolicyFamily::LogLinear => {
                if self.hidden.is_some() || self.head.is_some() {
                    return Err(Error::InvalidConfig(
                        "log-linear policy must not carry hidden/head weights".into(),
                    ));
                }
            }
            PolicyFamily::ShallowNonlinear => {
                let (Some(hidden), Some(head)) = (&self.hidden, &self.head) else {
                    return Err(Error::InvalidConfig(
                        "shallow-nonlinear policy needs hidden and head weights".into(),
                    ));
                };
                check_dim("hidden cols", self.spec.input_dim(), hidden.cols())?;
                check_dim("head rows", self.spec.action_count, head.rows())?;
                check_dim("head cols", hidden.rows(), head.cols())?;
            }
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite policy parameter".into()));
        }
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.spec.action_count
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.hidden.as_ref().map(Matrix::rows)
    }

    /// Dimension of [`hidden_repr`](Self::hidden_repr).
    pub fn repr_dim(&self) -> usize {
        self.hidden_dim().unwrap_or_else(|| self.spec.input_dim())
    }

    pub fn n_params(&self) -> usize {
        self.flatten().len()
    }

    /// `[w_E, w_rest, b, hidden (row-major), head (row-major)]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.w_env);
        v.extend_from_slice(&self.w_rest);
        v.push(self.bias);
        for m in [self.hidden.as_ref(), self.head.as_ref()].into_iter().flatten() {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.n_params(), flat.len())?;
        let (a, rest) = flat.split_at(self.w_env.len());
        self.w_env.copy_from_slice(a);
        let (a, rest) = rest.split_at(self.w_rest.len());
        self.w_rest.copy_from_slice(a);
        self.bias = rest[0];
        let mut rest = &rest[1..];
        for m in [self.hidden.as_mut(), self.head.as_mut()].into_iter().flatten() {
            let (a, r) = rest.split_at(m.as_slice().len());
            m.as_mut_slice().copy_from_slice(a);
            rest = r;
        }
        Ok(())
    }

    /// `θ ← θ − lr · grad`.
    pub fn descend(&mut self, grad: &ParamGrad, lr: f64) {
        axpy(&mut self.w_env, &grad.w_env, -lr);
        axpy(&mut self.w_rest, &grad.w_rest, -lr);
        self.bias -= lr * grad.bias;
        if let (Some(a), Some(b)) = (self.hidden.as_mut(), grad.hidden.as_ref()) {
            axpy(a.as_mut_slice(), b.as_slice(), -lr);
        }
        if let (Some(a), Some(b)) = (self.head.as_mut(), grad.head.as_ref()) {
            axpy(a.as_mut_slice(), b.as_slice(), -lr);
        }
    }

    fn forward(&self, x: &Context) -> Result<Forward> {
        self.spec.check_context(x)?;
        let input = x.concat();
        let activation = match &self.hidden {
            Some(w) => Some(w.matvec(&input)?.into_iter().map(f64::tanh).collect::<Vec<_>>()),
            None => None,
        };
        let scores = (0..self.spec.action_count)
            .map(|y| {
                let mut s = self.bias;
                for j in 0..self.spec.env_dim {
                    s += self.w_env[j] * x.env_features[j] * self.spec.env_item.get(y, j);
                }
                for j in 0..self.spec.rest_dim {
                    s += self.w_rest[j] * x.rest_features[j] * self.spec.rest_item.get(y, j);
                }
                if let (Some(head), Some(a)) = (&self.head, &activation) {
                    s += dot(head.row(y), a);
                }
                s
            })
            .collect();
        Ok(Forward {
            input,
            activation,
            scores,
        })
    }

    /// Unnormalized action scores `s(·|x)`.
    pub fn scores(&self, x: &Context) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.scores)
    }

    /// Log-probabilities of every action.
    pub fn log_probs(&self, x: &Context) -> Result<Vec<f64>> {
        let s = self.scores(x)?;
        let lse = log_sum_exp(&s);
        Ok(s.into_iter().map(|v| v - lse).collect())
    }

    /// `log π(y|x)`.
    pub fn log_prob(&self, x: &Context, y: usize) -> Result<f64> {
        self.spec.check_action(y)?;
        Ok(self.log_probs(x)?[y])
    }

    /// `grad += scale · Σ_y coeffs[y] ∇θ s(y|x)`.
    ///
    /// The bias contributes `Σ_y coeffs[y]`, which is exactly zero for every
    /// combination the policy code builds (log-softmax gradients and differences of them).
    pub fn accumulate_score_grad(
        &self,
        x: &Context,
        coeffs: &[f64],
        scale: f64,
        grad: &mut ParamGrad,
    ) -> Result<()> {
        check_dim("score coefficients", self.spec.action_count, coeffs.len())?;
        let fwd = self.forward(x)?;
        self.accumulate_with_forward(x, &fwd, coeffs, scale, grad);
        Ok(())
    }

    fn accumulate_with_forward(
        &self,
        x: &Context,
        fwd: &Forward,
        coeffs: &[f64],
        scale: f64,
        grad: &mut ParamGrad,
    ) {
        for (y, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let c = c * scale;
            let env_row = self.spec.env_item.row(y);
            for ((g, f), w) in grad.w_env.iter_mut().zip(&x.env_features).zip(env_row) {
                *g += c * f * w;
            }
            let rest_row = self.spec.rest_item.row(y);
            for ((g, f), w) in grad.w_rest.iter_mut().zip(&x.rest_features).zip(rest_row) {
                *g += c * f * w;
            }
        }
        if let (Some(head), Some(a), Some(g_head), Some(g_hidden)) = (
            &self.head,
            &fwd.activation,
            grad.head.as_mut(),
            grad.hidden.as_mut(),
        ) {
            let mut upstream = vec![0.0; a.len()];
            for (y, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let c = c * scale;
                let g_row = g_head.row_mut(y);
                for (h, &ah) in a.iter().enumerate() {
                    g_row[h] += c * ah;
                    upstream[h] += c * head.get(y, h);
                }
            }
            accumulate_tanh_layer(g_hidden, a, &fwd.input, &upstream);
        }
    }

    /// `∇θ log π(y|x)`.
    pub fn log_prob_grad(&self, x: &Context, y: usize) -> Result<ParamGrad> {
        self.spec.check_action(y)?;
        let fwd = self.forward(x)?;
        let lse = log_sum_exp(&fwd.scores);
        let mut coeffs: Vec<f64> = fwd.scores.iter().map(|s| -(s - lse).exp()).collect();
        coeffs[y] += 1.0;
        let mut grad = ParamGrad::zeros_like(self);
        self.accumulate_with_forward(x, &fwd, &coeffs, 1.0, &mut grad);
        Ok(grad)
    }

    /// Representation fed to the environment extractor: `[E; X_rest]` for the log-linear
    /// family, the post-activation hidden layer for the nonlinear one.
    pub fn hidden_repr(&self, x: &Context) -> Result<Vec<f64>> {
        let fwd = self.forward(x)?;
        Ok(fwd.activation.unwrap_or(fwd.input))
    }

    /// `grad += scale · (∂ hidden_repr(x) / ∂θ)ᵀ upstream`. No-op for the log-linear family,
    /// whose representation does not depend on θ.
    pub fn accumulate_repr_grad(
        &self,
        x: &Context,
        upstream: &[f64],
        scale: f64,
        grad: &mut ParamGrad,
    ) -> Result<()> {
        check_dim("representation upstream", self.repr_dim(), upstream.len())?;
        let fwd = self.forward(x)?;
        if let (Some(a), Some(g_hidden)) = (&fwd.activation, grad.hidden.as_mut()) {
            let up: Vec<f64> = upstream.iter().map(|u| u * scale).collect();
            accumulate_tanh_layer(g_hidden, a, &fwd.input, &up);
        }
        Ok(())
    }
}

/// `g_hidden[h][i] += upstream[h] · (1 − a_h²) · input[i]`.
fn accumulate_tanh_layer(g_hidden: &mut Matrix, a: &[f64], input: &[f64], upstream: &[f64]) {
    for (h, (&ah, &uh)) in a.iter().zip(upstream).enumerate() {
        let d = uh * (1.0 - ah * ah);
        if d == 0.0 {
            continue;
        }
        for (g, &xi) in g_hidden.row_mut(h).iter_mut().zip(input) {
            *g += d * xi;
        }
    }
}

/// Initialize a policy with [`DEFAULT_HIDDEN_DIM`] hidden units for the nonlinear family.
pub fn init_policy(spec: &FeatureSpec, family: PolicyFamily, seed: u64) -> Result<PolicyParams> {
    init_policy_with(spec, family, DEFAULT_HIDDEN_DIM, seed)
}

/// `w_E` starts at exactly zero; `w_rest`, `b` and the nonlinear weights are small Gaussians.
pub fn init_policy_with(
    spec: &FeatureSpec,
    family: PolicyFamily,
    hidden_dim: usize,
    seed: u64,
) -> Result<PolicyParams> {
    spec.validate()?;
    let mut rng = rng::substream(seed, "init");
    let small = Normal::new(0.0, 0.01).expect("valid normal");
    let w_rest = (0..spec.rest_dim).map(|_| small.sample(&mut rng)).collect();
    let bias = small.sample(&mut rng);
    let (hidden, head) = match family {
        PolicyFamily::LogLinear => (None, None),
        PolicyFamily::ShallowNonlinear => {
            if hidden_dim == 0 {
                return Err(Error::InvalidConfig("hidden_dim must be >= 1".into()));
            }
            let fan_in = Normal::new(0.0, 1.0 / (spec.input_dim() as f64).sqrt()).expect("valid");
            let hidden = Matrix::from_fn(hidden_dim, spec.input_dim(), |_, _| fan_in.sample(&mut rng));
            let head_scale = Normal::new(0.0, 0.1).expect("valid normal");
            let head = Matrix::from_fn(spec.action_count, hidden_dim, |_, _| head_scale.sample(&mut rng));
            (Some(hidden), Some(head))
        }
    };
    let params = PolicyParams {
        family,
        spec: spec.clone(),
        w_env: vec![0.0; spec.env_dim],
        w_rest,
        bias,
        hidden,
        head,
    };
    params.validate()?;
    Ok(params)
}

/// Frozen copy of a policy used as `π_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    params: PolicyParams,
}

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn log_probs(&self, x: &Context) -> Result<Vec<f64>> {
        self.params.log_probs(x)
    }

    pub fn log_prob(&self, x: &Context, y: usize) -> Result<f64> {
        self.params.log_prob(x, y)
    }

    /// Hash of the bit patterns of all log-probabilities on `probes`.
    pub fn fingerprint(&self, probes: &[Context]) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for x in probes {
            for lp in self.log_probs(x)? {
                lp.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }
}

pub fn freeze_reference(policy: &PolicyParams) -> ReferencePolicy {
    ReferencePolicy {
        params: policy.clone(),
    }
}
