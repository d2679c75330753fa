//! Preference optimization with an invariance penalty over discovered environments.
//!
//! Each step: representations of the batch are mapped through the extractor, clustered with
//! DBSCAN, and soft-assigned to the cluster centers. The DPO loss is combined with `λ` times the
//! pairwise MMD between the environment-weighted sets of policy outputs. Centers and the kernel
//! bandwidth are constants within a step; gradients reach the extractor through the memberships.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::divergence::{shared_sample_penalty, KernelConfig};
use crate::environments::{
    aggregate, discover, env_prior, extract, extract_backward, soft_assign_backward, soft_assign_scaled,
    AssignmentSnapshot, DbscanSettings, Discovery, ExtractorGrad, ExtractorParams, SoftAssignment,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{freeze_reference, init_policy_with, FeatureSpec, ParamGrad, PolicyFamily, PolicyParams, ReferencePolicy};
use crate::preference::{dpo_loss, dpo_loss_and_grad, preference_accuracy, warm_start, PreferenceTriple};
use crate::rng;

/// Which per-sample quantity is compared across environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyValues {
    /// The scalar `log π(y_w|x)`.
    #[default]
    ChosenLogProb,
    /// The representation fed to the extractor.
    HiddenState,
}

/// Largest tolerated deviation of a membership row sum from 1 during training.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub eta: f64,
    /// Epochs per outer round.
    pub epochs: usize,
    pub batch_size: usize,
    /// Outer rounds; the reference is refreshed to the current policy between rounds.
    pub iterations: usize,
    pub dbscan: DbscanSettings,
    pub kernel: KernelConfig,
    pub seed: u64,
    pub dump_envs: bool,
    pub family: PolicyFamily,
    pub hidden_dim: usize,
    /// Full-batch supervised steps before the reference is frozen; 0 disables the warm start.
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    /// Extractor output dimension; `None` uses one less than the representation dimension.
    pub extractor_dim: Option<usize>,
    pub extractor_lr: f64,
    /// Multiplier on distances inside the membership softmax.
    pub distance_scale: f64,
    /// Held-out triples used for accuracy logging, capped at a quarter of the dataset.
    pub probe_size: usize,
    pub penalty_values: PenaltyValues,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            lambda: 1.0,
            eta: 0.05,
            epochs: 3,
            batch_size: 64,
            iterations: 4,
            dbscan: DbscanSettings::default(),
            kernel: KernelConfig::default(),
            seed: 0,
            dump_envs: false,
            family: PolicyFamily::LogLinear,
            hidden_dim: crate::model::DEFAULT_HIDDEN_DIM,
            warm_start_steps: 100,
            warm_start_lr: 0.5,
            extractor_dim: None,
            extractor_lr: 0.05,
            distance_scale: 1.0,
            probe_size: 512,
            penalty_values: PenaltyValues::ChosenLogProb,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("beta", self.beta)?;
        positive("eta", self.eta)?;
        positive("distance_scale", self.distance_scale)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.extractor_lr >= 0.0 && self.extractor_lr.is_finite()) {
            return Err(Error::InvalidConfig("extractor_lr must be >= 0".into()));
        }
        if self.warm_start_steps > 0 {
            positive("warm_start_lr", self.warm_start_lr)?;
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.family == PolicyFamily::ShallowNonlinear && self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be >= 1".into()));
        }
        self.dbscan.validate()?;
        self.kernel.validate()
    }

    /// Label used in run summaries.
    pub fn method(&self) -> &'static str {
        if self.lambda == 0.0 {
            "dpo"
        } else {
            "causal-dpo"
        }
    }
}

/// Quantities held constant within one step: cluster centers and kernel bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFrame {
    pub centers: Matrix,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub dpo: f64,
    pub mmd: f64,
}

fn compose(dpo: f64, mmd: f64, lambda: f64) -> LossParts {
    LossParts {
        total: dpo + lambda * mmd,
        dpo,
        mmd,
    }
}

/// Per-sample values entering the penalty.
pub fn penalty_values(batch: &[PreferenceTriple], policy: &PolicyParams, mode: PenaltyValues) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .map(|t| match mode {
            PenaltyValues::ChosenLogProb => Ok(vec![policy.log_prob(&t.x, t.y_w)?]),
            PenaltyValues::HiddenState => policy.hidden_repr(&t.x),
        })
        .collect()
}

/// `grad += scale · (∂ values_i / ∂θ)ᵀ upstream` for one sample.
fn accumulate_value_grad(
    policy: &PolicyParams,
    t: &PreferenceTriple,
    mode: PenaltyValues,
    upstream: &[f64],
    scale: f64,
    grad: &mut ParamGrad,
) -> Result<()> {
    match mode {
        PenaltyValues::ChosenLogProb => {
            // ∂ log π(y_w) / ∂ s_y = [y = y_w] − π_y.
            let mut coeffs: Vec<f64> = policy.log_probs(&t.x)?.iter().map(|lp| -lp.exp() * upstream[0]).collect();
            coeffs[t.y_w] += upstream[0];
            policy.accumulate_score_grad(&t.x, &coeffs, scale, grad)
        }
        PenaltyValues::HiddenState => policy.accumulate_repr_grad(&t.x, upstream, scale, grad),
    }
}

/// Total, DPO, and penalty parts for a batch with memberships `envstate` from this batch. The
/// bandwidth follows `cfg.kernel` applied to the batch values.
pub fn causal_dpo_loss(
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    envstate: &SoftAssignment,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dpo = dpo_loss(batch, policy, reference, cfg.beta)?;
    let values = penalty_values(batch, policy, cfg.penalty_values)?;
    let sigma = cfg.kernel.resolve(&values);
    let mmd = shared_sample_penalty(&values, &envstate.probs, sigma, cfg.kernel.form)?.value;
    Ok(compose(dpo, mmd, cfg.lambda))
}

fn representations(batch: &[PreferenceTriple], policy: &PolicyParams) -> Result<Vec<Vec<f64>>> {
    batch.iter().map(|t| policy.hidden_repr(&t.x)).collect()
}

/// Hidden representations and their extracted embeddings, row per triple.
type Embedded = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn embed(batch: &[PreferenceTriple], policy: &PolicyParams, extractor: &ExtractorParams) -> Result<Embedded> {
    let h = representations(batch, policy)?;
    let z = h.iter().map(|hi| extract(extractor, hi)).collect::<Result<Vec<_>>>()?;
    Ok((h, z))
}

/// The step objective as a function of all parameters, with `frame` held fixed.
pub fn step_objective(
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    extractor: &ExtractorParams,
    frame: &StepFrame,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let dpo = dpo_loss(batch, policy, reference, cfg.beta)?;
    let (_, z) = embed(batch, policy, extractor)?;
    let assignment = soft_assign_scaled(&z, &frame.centers, cfg.distance_scale)?;
    let values = penalty_values(batch, policy, cfg.penalty_values)?;
    let mmd = shared_sample_penalty(&values, &assignment.probs, frame.sigma, cfg.kernel.form)?.value;
    Ok(compose(dpo, mmd, cfg.lambda))
}

#[derive(Debug, Clone)]
pub struct StepGradient {
    pub parts: LossParts,
    pub policy: ParamGrad,
    pub extractor: ExtractorGrad,
    pub kernel_evals: usize,
    pub assignment: SoftAssignment,
}

/// Gradient of [`step_objective`]. With `λ = 0` the penalty is evaluated for logging only and
/// contributes nothing to either gradient.
pub fn step_gradient(
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    extractor: &ExtractorParams,
    frame: &StepFrame,
    cfg: &TrainConfig,
) -> Result<StepGradient> {
    let (dpo, mut grad) = dpo_loss_and_grad(batch, policy, reference, cfg.beta)?;
    let (h, z) = embed(batch, policy, extractor)?;
    let assignment = soft_assign_scaled(&z, &frame.centers, cfg.distance_scale)?;
    let values = penalty_values(batch, policy, cfg.penalty_values)?;
    let pen = shared_sample_penalty(&values, &assignment.probs, frame.sigma, cfg.kernel.form)?;
    let mut g_ext = ExtractorGrad::zeros_like(extractor);
    if cfg.lambda > 0.0 && assignment.k() > 1 {
        let lambda = cfg.lambda;
        for (t, dv) in batch.iter().zip(&pen.d_values) {
            accumulate_value_grad(policy, t, cfg.penalty_values, dv, lambda, &mut grad)?;
        }
        let mut d_probs = pen.d_weights.clone();
        d_probs.as_mut_slice().iter_mut().for_each(|v| *v *= lambda);
        let dz = soft_assign_backward(&z, &assignment, &d_probs)?;
        for ((t, hi), dzi) in batch.iter().zip(&h).zip(&dz) {
            let dh = extract_backward(extractor, hi, dzi, &mut g_ext)?;
            policy.accumulate_repr_grad(&t.x, &dh, 1.0, &mut grad)?;
        }
    }
    Ok(StepGradient {
        parts: compose(dpo, pen.value, cfg.lambda),
        policy: grad,
        extractor: g_ext,
        kernel_evals: pen.kernel_evals,
        assignment,
    })
}

/// Per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub round: usize,
    pub epoch: usize,
    pub dpo_loss: f64,
    pub mmd_penalty: f64,
    pub total_loss: f64,
    pub lambda: f64,
    #[serde(rename = "K_discovered")]
    pub k_discovered: usize,
    pub env_prior: Vec<f64>,
    #[serde(rename = "w_E")]
    pub w_e: Option<Vec<f64>>,
    /// Accuracy on the held-out probe before this step's update; NaN (written as null) without a probe.
    #[serde(deserialize_with = "nan_if_null")]
    pub preference_accuracy: f64,
    pub kernel_evals: usize,
    pub bandwidth: f64,
    pub noise_points: usize,
    pub assignment_row_error: f64,
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Side outputs of one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: RunRecord,
    pub discovery: Discovery,
    /// `x̄^(k)` per environment over the batch representations; `None` for zero-mass clusters.
    pub aggregates: Vec<Option<Vec<f64>>>,
}

/// Position of a step inside a run, used only for labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepIndex {
    pub step: u64,
    pub round: usize,
    pub epoch: usize,
}

/// One update of policy and extractor on `batch`.
pub fn train_step(
    batch: &[PreferenceTriple],
    policy: &mut PolicyParams,
    reference: &ReferencePolicy,
    extractor: &mut ExtractorParams,
    cfg: &TrainConfig,
    probe: &[PreferenceTriple],
    at: StepIndex,
) -> Result<StepOutput> {
    if batch.len() < 2 {
        return Err(Error::InvalidConfig(format!("batch of {} triples; need at least 2", batch.len())));
    }
    let (h, z) = embed(batch, policy, extractor)?;
    let discovery = discover(&z, &cfg.dbscan, cfg.distance_scale)?;
    let row_error = discovery.assignment.max_row_error();
    if row_error > ROW_SUM_TOLERANCE {
        return Err(Error::CheckFailed(format!("membership row sums deviate from 1 by {row_error:e}")));
    }
    let aggregates = (0..discovery.assignment.k())
        .map(|k| aggregate(&h, &discovery.assignment, k).ok())
        .collect();
    let prior = env_prior(&discovery.assignment)?;
    let values = penalty_values(batch, policy, cfg.penalty_values)?;
    let frame = StepFrame {
        centers: discovery.assignment.centers.clone(),
        sigma: cfg.kernel.resolve(&values),
    };
    let accuracy = if probe.is_empty() { f64::NAN } else { preference_accuracy(probe, policy)? };
    let sg = step_gradient(batch, policy, reference, extractor, &frame, cfg)?;
    policy.descend(&sg.policy, cfg.eta);
    if cfg.lambda > 0.0 {
        extractor.descend(&sg.extractor, cfg.extractor_lr);
    }
    let record = RunRecord {
        step: at.step,
        round: at.round,
        epoch: at.epoch,
        dpo_loss: sg.parts.dpo,
        mmd_penalty: sg.parts.mmd,
        total_loss: sg.parts.total,
        lambda: cfg.lambda,
        k_discovered: discovery.k_discovered,
        env_prior: prior.p_hat,
        w_e: log_linear_w_e(policy),
        preference_accuracy: accuracy,
        kernel_evals: sg.kernel_evals,
        bandwidth: frame.sigma,
        noise_points: discovery.labels.iter().filter(|l| l.is_none()).count(),
        assignment_row_error: row_error,
    };
    Ok(StepOutput {
        record,
        discovery,
        aggregates,
    })
}

fn log_linear_w_e(policy: &PolicyParams) -> Option<Vec<f64>> {
    (policy.family == PolicyFamily::LogLinear).then(|| policy.w_env.clone())
}

/// Plain DPO update on `batch`, without environment discovery or penalty.
pub fn plain_dpo_step(
    batch: &[PreferenceTriple],
    policy: &mut PolicyParams,
    reference: &ReferencePolicy,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, grad) = dpo_loss_and_grad(batch, policy, reference, cfg.beta)?;
    policy.descend(&grad, cfg.eta);
    Ok(loss)
}

/// Serializable training state at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Round and epoch of the next epoch to run.
    pub round: usize,
    pub epoch: usize,
    /// Number of steps taken so far; the next step carries this index.
    pub step: u64,
    pub policy: PolicyParams,
    pub extractor: ExtractorParams,
    pub reference: PolicyParams,
}

/// Held-out probe and training pool: the probe holds `min(probe_size, n/4)` triples drawn once
/// from the run seed.
pub fn split_probe(dataset: &[PreferenceTriple], probe_size: usize, seed: u64) -> (Vec<PreferenceTriple>, Vec<PreferenceTriple>) {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng::substream(seed, "probe"));
    let k = probe_size.min(dataset.len() / 4);
    let mut probe_idx = idx[..k].to_vec();
    let mut train_idx = idx[k..].to_vec();
    probe_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        probe_idx.iter().map(|&i| dataset[i].clone()).collect(),
        train_idx.iter().map(|&i| dataset[i].clone()).collect(),
    )
}

/// Batches of one epoch: a seeded permutation cut into `batch_size` chunks. A final chunk with
/// fewer than 2 triples is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, round: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, &format!("shuffle/{round}/{epoch}")));
    idx.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Stateful training run, advanced one epoch at a time so callers can checkpoint in between.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    train: Vec<PreferenceTriple>,
    probe: Vec<PreferenceTriple>,
    policy: PolicyParams,
    extractor: ExtractorParams,
    reference: ReferencePolicy,
    round: usize,
    epoch: usize,
    step: u64,
    plain: bool,
    snapshots: Vec<AssignmentSnapshot>,
}

fn validate_dataset(dataset: &[PreferenceTriple], spec: &FeatureSpec) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    for t in dataset {
        t.validate(spec.action_count)?;
        spec.check_context(&t.x)?;
    }
    Ok(())
}

impl Trainer {
    /// Initialize parameters, run the warm start, and freeze the reference.
    pub fn new(dataset: &[PreferenceTriple], spec: &FeatureSpec, cfg: &TrainConfig) -> Result<Self> {
        Self::build(dataset, spec, cfg, false)
    }

    /// Same schedule as [`Trainer::new`] but every step is [`plain_dpo_step`].
    pub fn plain_dpo(dataset: &[PreferenceTriple], spec: &FeatureSpec, cfg: &TrainConfig) -> Result<Self> {
        Self::build(dataset, spec, cfg, true)
    }

    fn build(dataset: &[PreferenceTriple], spec: &FeatureSpec, cfg: &TrainConfig, plain: bool) -> Result<Self> {
        cfg.validate()?;
        validate_dataset(dataset, spec)?;
        let (probe, train) = split_probe(dataset, cfg.probe_size, cfg.seed);
        let mut policy = init_policy_with(spec, cfg.family, cfg.hidden_dim, cfg.seed)?;
        let repr = policy.repr_dim();
        let extractor = ExtractorParams::init(repr, cfg.extractor_dim.unwrap_or(repr.saturating_sub(1).max(1)), cfg.seed)?;
        if cfg.epochs > 0 && cfg.iterations > 0 && cfg.warm_start_steps > 0 {
            warm_start(&mut policy, &train, cfg.warm_start_steps, cfg.warm_start_lr)?;
        }
        let reference = freeze_reference(&policy);
        Ok(Self {
            cfg: cfg.clone(),
            train,
            probe,
            policy,
            extractor,
            reference,
            round: 0,
            epoch: 0,
            step: 0,
            plain,
            snapshots: Vec::new(),
        })
    }

    /// Continue a run from `ckpt`; `dataset` must be the dataset the run started with.
    pub fn resume(dataset: &[PreferenceTriple], spec: &FeatureSpec, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        validate_dataset(dataset, spec)?;
        ckpt.policy.validate()?;
        ckpt.extractor.validate()?;
        let (probe, train) = split_probe(dataset, ckpt.config.probe_size, ckpt.config.seed);
        Ok(Self {
            cfg: ckpt.config.clone(),
            train,
            probe,
            policy: ckpt.policy.clone(),
            extractor: ckpt.extractor.clone(),
            reference: freeze_reference(&ckpt.reference),
            round: ckpt.round,
            epoch: ckpt.epoch,
            step: ckpt.step,
            plain: false,
            snapshots: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn extractor(&self) -> &ExtractorParams {
        &self.extractor
    }

    pub fn reference(&self) -> &ReferencePolicy {
        &self.reference
    }

    pub fn probe(&self) -> &[PreferenceTriple] {
        &self.probe
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.cfg.epochs == 0 || self.round >= self.cfg.iterations
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            round: self.round,
            epoch: self.epoch,
            step: self.step,
            policy: self.policy.clone(),
            extractor: self.extractor.clone(),
            reference: self.reference.params().clone(),
        }
    }

    /// Membership snapshots collected since the last call (only with `dump_envs`).
    pub fn take_snapshots(&mut self) -> Vec<AssignmentSnapshot> {
        std::mem::take(&mut self.snapshots)
    }

    /// Run the next epoch and return its records. Empty once the run is finished.
    pub fn run_epoch(&mut self) -> Result<Vec<RunRecord>> {
        if self.is_finished() {
            return Ok(Vec::new());
        }
        let batches = epoch_batches(self.train.len(), self.cfg.batch_size, self.cfg.seed, self.round, self.epoch);
        let mut records = Vec::with_capacity(batches.len());
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<PreferenceTriple> = idx.iter().map(|&i| self.train[i].clone()).collect();
            let at = StepIndex {
                step: self.step,
                round: self.round,
                epoch: self.epoch,
            };
            let record = if self.plain {
                self.plain_record(&batch, at)?
            } else {
                let out = train_step(
                    &batch,
                    &mut self.policy,
                    &self.reference,
                    &mut self.extractor,
                    &self.cfg,
                    &self.probe,
                    at,
                )?;
                if self.cfg.dump_envs {
                    self.snapshots.push(AssignmentSnapshot {
                        step: at.step,
                        batch_index: bi,
                        probs: out.discovery.assignment.probs.clone(),
                        centers: out.discovery.assignment.centers.clone(),
                        noise_mask: out.discovery.assignment.noise_mask.clone(),
                    });
                }
                out.record
            };
            records.push(record);
            self.step += 1;
        }
        self.epoch += 1;
        if self.epoch >= self.cfg.epochs {
            self.epoch = 0;
            self.round += 1;
            if self.round < self.cfg.iterations {
                self.reference = freeze_reference(&self.policy);
            }
        }
        Ok(records)
    }

    fn plain_record(&mut self, batch: &[PreferenceTriple], at: StepIndex) -> Result<RunRecord> {
        let accuracy = if self.probe.is_empty() {
            f64::NAN
        } else {
            preference_accuracy(&self.probe, &self.policy)?
        };
        let loss = plain_dpo_step(batch, &mut self.policy, &self.reference, &self.cfg)?;
        Ok(RunRecord {
            step: at.step,
            round: at.round,
            epoch: at.epoch,
            dpo_loss: loss,
            mmd_penalty: 0.0,
            total_loss: loss,
            lambda: 0.0,
            k_discovered: 0,
            env_prior: Vec::new(),
            w_e: log_linear_w_e(&self.policy),
            preference_accuracy: accuracy,
            kernel_evals: 0,
            bandwidth: 0.0,
            noise_points: 0,
            assignment_row_error: 0.0,
        })
    }

    /// Run every remaining epoch.
    pub fn run_to_end(&mut self) -> Result<Vec<RunRecord>> {
        let mut all = Vec::new();
        while !self.is_finished() {
            all.extend(self.run_epoch()?);
        }
        Ok(all)
    }
}

/// Train from scratch and return the final policy with one record per step.
pub fn train(dataset: &[PreferenceTriple], spec: &FeatureSpec, cfg: &TrainConfig) -> Result<(PolicyParams, Vec<RunRecord>)> {
    let mut t = Trainer::new(dataset, spec, cfg)?;
    let records = t.run_to_end()?;
    Ok((t.policy, records))
}

/// Mean of `f` over the first and last `window` records: `(leading, trailing)`.
pub fn window_means(records: &[RunRecord], window: usize, f: impl Fn(&RunRecord) -> f64) -> Option<(f64, f64)> {
    if window == 0 || records.len() < window {
        return None;
    }
    let mean = |rs: &[RunRecord]| rs.iter().map(&f).sum::<f64>() / rs.len() as f64;
    Some((mean(&records[..window]), mean(&records[records.len() - window..])))
}

/// End-of-run metrics written next to the record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: String,
    pub steps: u64,
    pub seed: u64,
    pub lambda: f64,
    pub final_dpo_loss: Option<f64>,
    pub final_mmd_penalty: Option<f64>,
    /// Mean penalty over the first and last 100 steps.
    pub leading_mmd_mean: Option<f64>,
    pub trailing_mmd_mean: Option<f64>,
    pub probe_accuracy: Option<f64>,
    #[serde(rename = "w_E")]
    pub w_e: Option<Vec<f64>>,
}

pub const SUMMARY_WINDOW: usize = 100;

pub fn summarize(trainer: &Trainer, records: &[RunRecord]) -> Result<TrainSummary> {
    let cfg = trainer.config();
    let windows = window_means(records, SUMMARY_WINDOW, |r| r.mmd_penalty);
    let probe_accuracy = if trainer.probe().is_empty() {
        None
    } else {
        Some(preference_accuracy(trainer.probe(), trainer.policy())?)
    };
    Ok(TrainSummary {
        method: cfg.method().to_string(),
        steps: trainer.steps_taken(),
        seed: cfg.seed,
        lambda: cfg.lambda,
        final_dpo_loss: records.last().map(|r| r.dpo_loss),
        final_mmd_penalty: records.last().map(|r| r.mmd_penalty),
        leading_mmd_mean: windows.map(|w| w.0),
        trailing_mmd_mean: windows.map(|w| w.1),
        probe_accuracy,
        w_e: log_linear_w_e(trainer.policy()),
    })
}
