//! Preference triples, the DPO reward/loss/gradient and preference accuracy.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Context, ParamGrad, PolicyParams, ReferencePolicy};

/// One `(x, y_w, y_l)` example. `env_label` is ground truth kept for evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    #[serde(flatten)]
    pub x: Context,
    pub y_w: usize,
    pub y_l: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_label: Option<usize>,
}

impl PreferenceTriple {
    pub fn new(x: Context, y_w: usize, y_l: usize) -> Self {
        Self {
            x,
            y_w,
            y_l,
            env_label: None,
        }
    }

    pub fn validate(&self, action_count: usize) -> Result<()> {
        for y in [self.y_w, self.y_l] {
            if y >= action_count {
                return Err(Error::InvalidAction {
                    index: y,
                    count: action_count,
                });
            }
        }
        if self.y_w == self.y_l {
            return Err(Error::InvalidConfig(format!(
                "preference triple with y_w == y_l == {}",
                self.y_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 2.0 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")))
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`, exact in both tails.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Loss on the reward margin `Δr`. Alternative pairwise losses plug in here.
pub trait MarginLoss {
    fn value(&self, margin: f64) -> f64;
    /// `d value / d margin`.
    fn slope(&self, margin: f64) -> f64;
}

/// `−log σ(Δr)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SigmoidLoss;

impl MarginLoss for SigmoidLoss {
    fn value(&self, margin: f64) -> f64 {
        softplus(-margin)
    }

    fn slope(&self, margin: f64) -> f64 {
        -sigmoid(-margin)
    }
}

/// `r(x, y) = β (log π_θ(y|x) − log π_ref(y|x))`.
pub fn reward(
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    x: &Context,
    y: usize,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    Ok(beta * (policy.log_prob(x, y)? - reference.log_prob(x, y)?))
}

/// `Δr = r(x, y_w) − r(x, y_l)`.
pub fn reward_margin(
    triple: &PreferenceTriple,
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    triple.validate(policy.action_count())?;
    let lp = policy.log_probs(&triple.x)?;
    let lr = reference.log_probs(&triple.x)?;
    Ok(beta * ((lp[triple.y_w] - lr[triple.y_w]) - (lp[triple.y_l] - lr[triple.y_l])))
}

pub fn reward_margins(
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| reward_margin(t, policy, reference, beta))
        .collect()
}

/// Mean of `loss(Δr)` and its gradient under an arbitrary [`MarginLoss`].
pub fn margin_loss_and_grad(
    loss: &impl MarginLoss,
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<(f64, ParamGrad)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grad = ParamGrad::zeros_like(policy);
    let mut coeffs = vec![0.0; policy.action_count()];
    for t in batch {
        let m = reward_margin(t, policy, reference, beta)?;
        total += loss.value(m);
        // ∇Δr = β (∇s(y_w) − ∇s(y_l)); the log-partition terms cancel.
        coeffs.iter_mut().for_each(|c| *c = 0.0);
        coeffs[t.y_w] = 1.0;
        coeffs[t.y_l] = -1.0;
        policy.accumulate_score_grad(&t.x, &coeffs, loss.slope(m) * beta / n, &mut grad)?;
    }
    grad.bias = 0.0;
    Ok((total / n, grad))
}

/// Mean over the batch of `−log σ(Δr)`.
pub fn dpo_loss(
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for t in batch {
        total += softplus(-reward_margin(t, policy, reference, beta)?);
    }
    Ok(total / batch.len() as f64)
}

/// `−β · mean[(1 − σ(Δr)) (∇ log π(y_w) − ∇ log π(y_l))]`.
pub fn dpo_grad(
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<ParamGrad> {
    Ok(margin_loss_and_grad(&SigmoidLoss, batch, policy, reference, beta)?.1)
}

pub fn dpo_loss_and_grad(
    batch: &[PreferenceTriple],
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    beta: f64,
) -> Result<(f64, ParamGrad)> {
    margin_loss_and_grad(&SigmoidLoss, batch, policy, reference, beta)
}

/// Fraction of triples with `log π(y_w|x) > log π(y_l|x)`; ties count as misses.
pub fn preference_accuracy(batch: &[PreferenceTriple], policy: &PolicyParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for t in batch {
        t.validate(policy.action_count())?;
        let s = policy.scores(&t.x)?;
        if s[t.y_w] > s[t.y_l] {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

/// Mean `−log π(y_w|x)` and its gradient: the supervised objective used for warm starts.
pub fn sft_loss_and_grad(batch: &[PreferenceTriple], policy: &PolicyParams) -> Result<(f64, ParamGrad)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grad = ParamGrad::zeros_like(policy);
    for t in batch {
        t.validate(policy.action_count())?;
        total -= policy.log_prob(&t.x, t.y_w)?;
        grad.add_scaled(&policy.log_prob_grad(&t.x, t.y_w)?, -1.0 / n);
    }
    Ok((total / n, grad))
}

/// Full-batch gradient descent on [`sft_loss_and_grad`].
pub fn warm_start(policy: &mut PolicyParams, batch: &[PreferenceTriple], steps: usize, lr: f64) -> Result<()> {
    for _ in 0..steps {
        let (_, g) = sft_loss_and_grad(batch, policy)?;
        policy.descend(&g, lr);
    }
    Ok(())
}

/// One triple per non-blank line. Rejects `y_w == y_l`; action ranges are checked by the consumer,
/// which knows the action count.
pub fn read_triples(reader: impl Read) -> Result<Vec<PreferenceTriple>> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PreferenceTriple = serde_json::from_str(&line)?;
        t.validate(usize::MAX)?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_triples(mut writer: impl Write, triples: &[PreferenceTriple]) -> Result<()> {
    for t in triples {
        serde_json::to_writer(&mut writer, t)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
