//! Finite structural causal models `E → X`, `X → Y`, `E → Y`, their interventional ground truth,
//! the backdoor estimator, the spurious-weight amplification experiment and the
//! TV-based generalization bound.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{freeze_reference, init_policy, Context, FeatureSpec, PolicyFamily, PolicyParams};
use crate::preference::{dpo_loss_and_grad, reward_margins, sigmoid, warm_start, PreferenceTriple};
use crate::rng::{self, Rng};

const ROW_TOLERANCE: f64 = 1e-9;

/// Tabular SCM. Indexing: `x_given_e[e][x]`, `y_given_xe[e][x][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub env_prior: Vec<f64>,
    pub x_given_e: Vec<Vec<f64>>,
    pub y_given_xe: Vec<Vec<Vec<f64>>>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.is_empty() {
        return Err(Error::InvalidTable(format!("{what}: empty row")));
    }
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidTable(format!("{what}: entry outside [0, 1]")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidTable(format!("{what}: row sums to {s}")));
    }
    Ok(())
}

impl ScmSpec {
    pub fn n_env(&self) -> usize {
        self.env_prior.len()
    }

    pub fn n_x(&self) -> usize {
        self.x_given_e.first().map_or(0, Vec::len)
    }

    pub fn n_y(&self) -> usize {
        self.y_given_xe
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_row(&self.env_prior, "env_prior")?;
        let (ne, nx, ny) = (self.n_env(), self.n_x(), self.n_y());
        if self.x_given_e.len() != ne || self.y_given_xe.len() != ne {
            return Err(Error::InvalidTable("conditional tables need one block per environment".into()));
        }
        for e in 0..ne {
            if self.x_given_e[e].len() != nx || self.y_given_xe[e].len() != nx {
                return Err(Error::InvalidTable("ragged X grid".into()));
            }
            check_row(&self.x_given_e[e], "x_given_e")?;
            for x in 0..nx {
                if self.y_given_xe[e][x].len() != ny {
                    return Err(Error::InvalidTable("ragged action set".into()));
                }
                check_row(&self.y_given_xe[e][x], "y_given_xe")?;
            }
        }
        Ok(())
    }

    fn check_x(&self, x: usize) -> Result<()> {
        if x < self.n_x() {
            Ok(())
        } else {
            Err(Error::UnknownValue(format!("x = {x} outside grid of {}", self.n_x())))
        }
    }

    /// `p(x) = Σ_e p(e) p(x|e)`.
    pub fn x_marginal(&self) -> Vec<f64> {
        (0..self.n_x())
            .map(|x| (0..self.n_env()).map(|e| self.env_prior[e] * self.x_given_e[e][x]).sum())
            .collect()
    }

    /// `p(e|x)`; `None` when `p(x) = 0`.
    pub fn env_posterior(&self, x: usize) -> Option<Vec<f64>> {
        let joint: Vec<f64> = (0..self.n_env())
            .map(|e| self.env_prior[e] * self.x_given_e[e][x])
            .collect();
        let z: f64 = joint.iter().sum();
        (z > 0.0).then(|| joint.into_iter().map(|j| j / z).collect())
    }

    /// Observational `p(y|x) = Σ_e p(e|x) p(y|x,e)`.
    pub fn observational(&self, x: usize) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let post = self
            .env_posterior(x)
            .ok_or(Error::ZeroMass("p(x) in observational conditional"))?;
        Ok(mix(&post, |e| &self.y_given_xe[e][x], self.n_y()))
    }
}

fn mix<'a>(weights: &[f64], row: impl Fn(usize) -> &'a Vec<f64>, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (e, w) in weights.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(row(e)) {
            *o += w * p;
        }
    }
    out
}

/// Random SCM with every entry bounded away from zero.
pub fn random_scm(n_env: usize, n_x: usize, n_y: usize, rng: &mut Rng) -> ScmSpec {
    let mut row = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|p| p / s).collect::<Vec<f64>>()
    };
    ScmSpec {
        env_prior: row(n_env),
        x_given_e: (0..n_env).map(|_| row(n_x)).collect(),
        y_given_xe: (0..n_env).map(|_| (0..n_x).map(|_| row(n_y)).collect()).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScmSample {
    pub e: usize,
    pub x: usize,
    pub y: usize,
}

/// Ancestral sampling `e ~ p(E)` (or `env_override`), `x ~ p(X|e)`, `y ~ p(Y|x,e)`.
pub fn scm_sample(spec: &ScmSpec, n: usize, env_override: Option<&[f64]>, seed: u64) -> Result<Vec<ScmSample>> {
    spec.validate()?;
    let prior = match env_override {
        Some(p) => {
            check_dim("environment override", spec.n_env(), p.len())?;
            check_row(p, "env_override")?;
            p
        }
        None => &spec.env_prior[..],
    };
    let mut rng = rng::substream(seed, "data");
    let weighted = |w: &[f64]| WeightedIndex::new(w).map_err(|e| Error::InvalidTable(e.to_string()));
    let e_dist = weighted(prior)?;
    let x_dist = spec.x_given_e.iter().map(|r| weighted(r)).collect::<Result<Vec<_>>>()?;
    let y_dist = spec
        .y_given_xe
        .iter()
        .map(|rows| rows.iter().map(|r| weighted(r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .map(|_| {
            let e = e_dist.sample(&mut rng);
            let x = x_dist[e].sample(&mut rng);
            let y = y_dist[e][x].sample(&mut rng);
            ScmSample { e, x, y }
        })
        .collect())
}

/// Ground truth `p(Y|do(X=x)) = Σ_e p(Y|x,e) p(e)`.
pub fn interventional_enum(spec: &ScmSpec, x: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    spec.check_x(x)?;
    Ok(mix(&spec.env_prior, |e| &spec.y_given_xe[e][x], spec.n_y()))
}

/// A model of `p(Y | X = x, E = k)`.
pub trait ConditionalModel {
    fn n_env(&self) -> usize;
    fn conditional(&self, x: usize, k: usize) -> Result<Vec<f64>>;
}

/// Conditional table `[e][x][y]`, e.g. estimated from samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondTable {
    pub y_given_xe: Vec<Vec<Vec<f64>>>,
}

impl ConditionalModel for CondTable {
    fn n_env(&self) -> usize {
        self.y_given_xe.len()
    }

    fn conditional(&self, x: usize, k: usize) -> Result<Vec<f64>> {
        self.y_given_xe
            .get(k)
            .and_then(|r| r.get(x))
            .cloned()
            .ok_or_else(|| Error::UnknownValue(format!("(x = {x}, e = {k}) outside table")))
    }
}

impl ConditionalModel for ScmSpec {
    fn n_env(&self) -> usize {
        self.env_prior.len()
    }

    fn conditional(&self, x: usize, k: usize) -> Result<Vec<f64>> {
        self.check_x(x)?;
        self.y_given_xe
            .get(k)
            .map(|r| r[x].clone())
            .ok_or_else(|| Error::UnknownValue(format!("environment {k}")))
    }
}

/// Embeddings of environment values and X-grid points into policy contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMap {
    /// `|E| × env_dim`.
    pub env_embed: Matrix,
    /// `|X| × rest_dim`.
    pub x_embed: Matrix,
}

impl FeatureMap {
    pub fn context(&self, e: usize, x: usize) -> Context {
        Context::new(self.env_embed.row(e).to_vec(), self.x_embed.row(x).to_vec())
    }

    fn check(&self, spec: &ScmSpec, features: &FeatureSpec) -> Result<()> {
        check_dim("env_embed rows", spec.n_env(), self.env_embed.rows())?;
        check_dim("x_embed rows", spec.n_x(), self.x_embed.rows())?;
        check_dim("env_embed cols", features.env_dim, self.env_embed.cols())?;
        check_dim("x_embed cols", features.rest_dim, self.x_embed.cols())?;
        check_dim("action set", spec.n_y(), features.action_count)
    }
}

/// A policy read as `p(Y | x, E = k)` through a feature map.
pub struct PolicyConditional<'a> {
    pub policy: &'a PolicyParams,
    pub features: &'a FeatureMap,
}

impl ConditionalModel for PolicyConditional<'_> {
    fn n_env(&self) -> usize {
        self.features.env_embed.rows()
    }

    fn conditional(&self, x: usize, k: usize) -> Result<Vec<f64>> {
        if x >= self.features.x_embed.rows() || k >= self.n_env() {
            return Err(Error::UnknownValue(format!("(x = {x}, e = {k}) outside feature map")));
        }
        Ok(self
            .policy
            .log_probs(&self.features.context(k, x))?
            .into_iter()
            .map(f64::exp)
            .collect())
    }
}

/// `p(Y|do(X=x)) ≈ Σ_k p(Y|x, E=k) · p̂(E=k)`.
pub fn backdoor_estimate(cond: &impl ConditionalModel, prior: &[f64], x: usize) -> Result<Vec<f64>> {
    check_dim("environment prior", cond.n_env(), prior.len())?;
    let mut out: Vec<f64> = Vec::new();
    for (k, &w) in prior.iter().enumerate() {
        let row = cond.conditional(x, k)?;
        if out.is_empty() {
            out = vec![0.0; row.len()];
        }
        check_dim("conditional row", out.len(), row.len())?;
        for (o, p) in out.iter_mut().zip(&row) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Plug-in frequency estimates of `p(E)` and `p(Y|X,E)`. Unobserved `(e, x)` cells get a
/// uniform row.
pub fn estimate_tables(samples: &[ScmSample], n_env: usize, n_x: usize, n_y: usize) -> Result<(Vec<f64>, CondTable)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("scm samples"));
    }
    let mut env_counts = vec![0usize; n_env];
    let mut counts = vec![vec![vec![0usize; n_y]; n_x]; n_env];
    for s in samples {
        if s.e >= n_env || s.x >= n_x || s.y >= n_y {
            return Err(Error::UnknownValue(format!("sample {s:?} outside table shape")));
        }
        env_counts[s.e] += 1;
        counts[s.e][s.x][s.y] += 1;
    }
    let n = samples.len() as f64;
    let prior = env_counts.iter().map(|&c| c as f64 / n).collect();
    let table = counts
        .into_iter()
        .map(|rows| {
            rows.into_iter()
                .map(|row| {
                    let t: usize = row.iter().sum();
                    if t == 0 {
                        vec![1.0 / n_y as f64; n_y]
                    } else {
                        row.into_iter().map(|c| c as f64 / t as f64).collect()
                    }
                })
                .collect()
        })
        .collect();
    Ok((prior, CondTable { y_given_xe: table }))
}

/// `max_{x,y} |backdoor − interventional|` over the X grid.
pub fn max_backdoor_deviation(spec: &ScmSpec, cond: &impl ConditionalModel, prior: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in 0..spec.n_x() {
        let truth = interventional_enum(spec, x)?;
        let est = backdoor_estimate(cond, prior, x)?;
        for (a, b) in truth.iter().zip(&est) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Per-x term `|Σ_y p_test(y|x) Σ_e (p_test(e|x) − p_train(e|x)) w_E·f_E(y,e)|` and its TV.
fn gen_err_terms(
    policy: &PolicyParams,
    features: &FeatureMap,
    train: &ScmSpec,
    test: &ScmSpec,
) -> Result<Vec<(f64, f64, f64)>> {
    train.validate()?;
    test.validate()?;
    if train.n_env() != test.n_env() || train.n_x() != test.n_x() || train.n_y() != test.n_y() {
        return Err(Error::InvalidTable("train and test SCMs use different grids".into()));
    }
    features.check(train, &policy.spec)?;
    let px = test.x_marginal();
    let mut out = Vec::with_capacity(test.n_x());
    for (x, &p) in px.iter().enumerate() {
        if p == 0.0 {
            out.push((0.0, 0.0, 0.0));
            continue;
        }
        let pt = test.env_posterior(x).expect("p_test(x) > 0");
        let pr = train
            .env_posterior(x)
            .ok_or_else(|| Error::InvalidTable(format!("x = {x} has zero training mass")))?;
        let py = test.observational(x)?;
        let mut inner = 0.0;
        for (y, &pyv) in py.iter().enumerate() {
            for e in 0..test.n_env() {
                let fe = policy.spec.env_features_of(&features.context(e, x), y);
                inner += pyv * (pt[e] - pr[e]) * dot(&policy.w_env, &fe);
            }
        }
        let tv = 0.5 * pt.iter().zip(&pr).map(|(a, b)| (a - b).abs()).sum::<f64>();
        out.push((px[x], inner.abs(), tv));
    }
    Ok(out)
}

/// Exact generalization error by enumerating the X grid.
pub fn gen_err_exact(policy: &PolicyParams, features: &FeatureMap, train: &ScmSpec, test: &ScmSpec) -> Result<f64> {
    Ok(gen_err_terms(policy, features, train, test)?
        .iter()
        .map(|(p, g, _)| p * g)
        .sum())
}

/// Monte Carlo generalization error: `x` drawn from `p_test(x)`, inner expectations exact.
pub fn empirical_gen_err(
    policy: &PolicyParams,
    features: &FeatureMap,
    train: &ScmSpec,
    test: &ScmSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyInput("monte carlo sample count"));
    }
    let terms = gen_err_terms(policy, features, train, test)?;
    let px: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let dist = WeightedIndex::new(&px).map_err(|e| Error::InvalidTable(e.to_string()))?;
    let mut rng = rng::substream(seed, "data");
    let total: f64 = (0..n).map(|_| terms[dist.sample(&mut rng)].1).sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub gen_err: f64,
    pub bound_value: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub tv_mean: f64,
    pub w_e_norm: f64,
    pub holds: bool,
}

/// `gen_err ≤ 2 C ‖w_E‖ E_{p_test(x)}[TV(p_train(E|x), p_test(E|x))]`. `C` defaults to the
/// computed `max ‖f_E‖` over the grid; a supplied `C` below that is rejected.
pub fn gen_err_bound(
    policy: &PolicyParams,
    features: &FeatureMap,
    train: &ScmSpec,
    test: &ScmSpec,
    c: Option<f64>,
) -> Result<BoundReport> {
    let terms = gen_err_terms(policy, features, train, test)?;
    let envs: Vec<Vec<f64>> = (0..features.env_embed.rows())
        .map(|e| features.env_embed.row(e).to_vec())
        .collect();
    let c_grid = policy.spec.env_feature_bound(&envs);
    let c = match c {
        Some(v) if v + 1e-12 < c_grid => {
            return Err(Error::BoundViolated(format!("C = {v} below max |f_E| = {c_grid}")));
        }
        Some(v) => v,
        None => c_grid,
    };
    let gen_err: f64 = terms.iter().map(|(p, g, _)| p * g).sum();
    let tv_mean: f64 = terms.iter().map(|(p, _, tv)| p * tv).sum();
    let w_e_norm = dot(&policy.w_env, &policy.w_env).sqrt();
    let bound_value = 2.0 * c * w_e_norm * tv_mean;
    Ok(BoundReport {
        gen_err,
        bound_value,
        c,
        tv_mean,
        w_e_norm,
        // Equality cases (both zero) must hold despite rounding in the two sums.
        holds: gen_err <= bound_value * (1.0 + 1e-12) + 1e-15,
    })
}

/// Settings for the spurious-weight amplification experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmplificationConfig {
    pub eta: f64,
    pub steps: usize,
    pub beta: f64,
    /// Probability that `y_w` comes from the environment-aligned action group is `0.5 + 0.5 · bias_strength`.
    pub bias_strength: f64,
    pub seed: u64,
    pub n_triples: usize,
    /// Actions per group; the action set has two groups.
    pub group_size: usize,
    /// Supervised steps that produce the reference policy.
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
}

impl Default for AmplificationConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            steps: 500,
            beta: 2.0,
            bias_strength: 0.9,
            seed: 0,
            n_triples: 2000,
            group_size: 3,
            warm_start_steps: 200,
            warm_start_lr: 0.5,
        }
    }
}

impl AmplificationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig("eta must be positive".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::InvalidConfig("bias_strength must lie in [0, 1]".into()));
        }
        if self.n_triples < 1 || self.group_size < 2 {
            return Err(Error::InvalidConfig("need n_triples >= 1 and group_size >= 2".into()));
        }
        if !(self.warm_start_lr >= 0.0 && self.warm_start_lr.is_finite()) {
            return Err(Error::InvalidConfig("warm_start_lr must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Biased preference data: two equally likely environments with imprint `E = ±1`, two action
/// groups with attribute `a(y) = ±1`, and a one-hot task feature shared by every action.
/// `f_E(y, E) = E · a(y)`, so `E[f_E(y_w) − f_E(y_l)] > 0` whenever `bias_strength > 0`.
/// Because `f_rest` does not vary with `y`, `w_rest` cancels in the softmax and `w_E` is the only
/// weight training can move.
pub fn amplification_dataset(cfg: &AmplificationConfig) -> Result<(FeatureSpec, FeatureMap, Vec<PreferenceTriple>)> {
    cfg.validate()?;
    let g = cfg.group_size;
    let n_actions = 2 * g;
    let group = |y: usize| if y < g { 1.0 } else { -1.0 };
    let spec = FeatureSpec::new(
        Matrix::from_fn(n_actions, 1, |y, _| group(y)),
        Matrix::from_fn(n_actions, g, |_, _| 1.0),
    )?;
    let features = FeatureMap {
        env_embed: Matrix::from_rows(&[vec![-1.0], vec![1.0]])?,
        x_embed: Matrix::from_fn(g, g, |r, c| if r == c { 1.0 } else { 0.0 }),
    };
    let q = 0.5 + 0.5 * cfg.bias_strength;
    let mut rng = rng::substream(cfg.seed, "data");
    let triples = (0..cfg.n_triples)
        .map(|_| {
            let e = rng.random_range(0..2);
            let x = rng.random_range(0..g);
            let imprint = features.env_embed.get(e, 0);
            let aligned = rng.random::<f64>() < q;
            let target = if aligned { imprint } else { -imprint };
            let offset = if target > 0.0 { 0 } else { g };
            let y_w = offset + rng.random_range(0..g);
            let mut y_l = rng.random_range(0..n_actions - 1);
            if y_l >= y_w {
                y_l += 1;
            }
            PreferenceTriple {
                x: features.context(e, x),
                y_w,
                y_l,
                env_label: Some(e),
            }
        })
        .collect();
    Ok((spec, features, triples))
}

/// The tabular SCM that [`amplification_dataset`] samples `y_w` from, indexed like its
/// [`FeatureMap`]: `X` is uniform and independent of `E`, and `y` is uniform inside a group
/// chosen with probability `q` for the environment-aligned one.
pub fn amplification_scm(cfg: &AmplificationConfig) -> Result<ScmSpec> {
    cfg.validate()?;
    let g = cfg.group_size;
    let q = 0.5 + 0.5 * cfg.bias_strength;
    // Environment 0 carries imprint −1 and favors the second group.
    let row = |e: usize| -> Vec<f64> {
        (0..2 * g)
            .map(|y| {
                let aligned = (y < g) == (e == 1);
                if aligned { q / g as f64 } else { (1.0 - q) / g as f64 }
            })
            .collect()
    };
    let spec = ScmSpec {
        env_prior: vec![0.5, 0.5],
        x_given_e: vec![vec![1.0 / g as f64; g]; 2],
        y_given_xe: (0..2).map(|e| vec![row(e); g]).collect(),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    #[serde(rename = "w_E")]
    pub w_e: f64,
    /// `w_E(t) − w_E(0)`.
    #[serde(rename = "delta_E")]
    pub delta_e: f64,
    pub loss: f64,
    pub mean_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

/// Saturation level of mean `σ(Δr)` past which monotone growth is no longer asserted.
pub const SATURATION: f64 = 0.99;
/// Steps over which the early slope is measured.
pub const SLOPE_WINDOW: usize = 10;
/// Relative slope error accepted by [`check_amplification`].
pub const SLOPE_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    /// `η β mean[f_E(y_w) − f_E(y_l)]`.
    pub predicted_slope: f64,
    /// `(w_E(10) − w_E(0)) / 10`.
    pub measured_slope: f64,
    pub slope_rel_err: f64,
    pub slope_check: CheckStatus,
    pub monotonicity: CheckStatus,
    /// First step whose update failed to increase `w_E` inside the unsaturated window.
    pub first_violation: Option<usize>,
    pub final_w_e: f64,
    pub final_mean_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplificationRun {
    pub trajectory: Vec<TrajectoryRow>,
    pub report: AmplificationReport,
    pub policy: PolicyParams,
    pub features: FeatureMap,
}

/// Full-batch DPO from `w_E = 0` against a reference warm-started on the preferred actions.
pub fn run_amplification(cfg: &AmplificationConfig) -> Result<AmplificationRun> {
    let (spec, features, triples) = amplification_dataset(cfg)?;
    let mut policy = init_policy(&spec, PolicyFamily::LogLinear, cfg.seed)?;
    let init = policy.clone();
    let mut warm = policy.clone();
    warm_start(&mut warm, &triples, cfg.warm_start_steps, cfg.warm_start_lr)?;
    let reference = freeze_reference(&warm);

    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (loss, grad) = dpo_loss_and_grad(&triples, &policy, &reference, cfg.beta)?;
        let margins = reward_margins(&triples, &policy, &reference, cfg.beta)?;
        let mean_sigma = margins.iter().map(|m| sigmoid(*m)).sum::<f64>() / margins.len() as f64;
        trajectory.push(TrajectoryRow {
            step,
            w_e: policy.w_env[0],
            delta_e: policy.w_env[0] - init.w_env[0],
            loss,
            mean_sigma,
        });
        if step < cfg.steps {
            policy.descend(&grad, cfg.eta);
        }
    }

    let mean_df: f64 = triples
        .iter()
        .map(|t| spec.env_features_of(&t.x, t.y_w)[0] - spec.env_features_of(&t.x, t.y_l)[0])
        .sum::<f64>()
        / triples.len() as f64;
    let report = check_amplification(&trajectory, cfg.eta * cfg.beta * mean_df, cfg.bias_strength > 0.0);
    Ok(AmplificationRun {
        trajectory,
        report,
        policy,
        features,
    })
}

/// Monotone growth while unsaturated, and early slope within [`SLOPE_TOLERANCE`] of `predicted_slope`.
pub fn check_amplification(trajectory: &[TrajectoryRow], predicted_slope: f64, biased: bool) -> AmplificationReport {
    let window = SLOPE_WINDOW.min(trajectory.len().saturating_sub(1)).max(1);
    let measured_slope = match trajectory.get(window) {
        Some(r) => (r.w_e - trajectory[0].w_e) / window as f64,
        None => 0.0,
    };
    let slope_rel_err = if predicted_slope != 0.0 {
        ((measured_slope - predicted_slope) / predicted_slope).abs()
    } else {
        f64::INFINITY
    };
    let first_violation = trajectory
        .windows(2)
        .find(|w| w[0].mean_sigma < SATURATION && w[1].w_e <= w[0].w_e)
        .map(|w| w[0].step);
    let last = trajectory.last().copied();
    let (monotonicity, slope_check) = if biased {
        (
            if first_violation.is_none() { CheckStatus::Pass } else { CheckStatus::Fail },
            if slope_rel_err <= SLOPE_TOLERANCE { CheckStatus::Pass } else { CheckStatus::Fail },
        )
    } else {
        (CheckStatus::NotApplicable, CheckStatus::NotApplicable)
    };
    AmplificationReport {
        predicted_slope,
        measured_slope,
        slope_rel_err,
        slope_check,
        monotonicity,
        first_violation,
        final_w_e: last.map_or(0.0, |r| r.w_e),
        final_mean_sigma: last.map_or(0.0, |r| r.mean_sigma),
    }
}

pub fn write_trajectory_csv(writer: impl Write, trajectory: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in trajectory {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// An SCM pair that differs only in `p(X|E)`, so `p(E|x)` shifts between train and test.
pub fn shifted_pair(base: &ScmSpec, rng: &mut Rng) -> ScmSpec {
    let mut test = base.clone();
    for row in &mut test.x_given_e {
        let v: Vec<f64> = row.iter().map(|p| p * rng.random_range(0.2..5.0)).collect();
        let s: f64 = v.iter().sum();
        *row = v.into_iter().map(|p| p / s).collect();
    }
    test
}

/// Feature map with Gaussian environment and task embeddings.
pub fn random_feature_map(spec: &ScmSpec, env_dim: usize, rest_dim: usize, rng: &mut Rng) -> FeatureMap {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    FeatureMap {
        env_embed: Matrix::from_fn(spec.n_env(), env_dim, |_, _| n.sample(rng)),
        x_embed: Matrix::from_fn(spec.n_x(), rest_dim, |_, _| n.sample(rng)),
    }
}
