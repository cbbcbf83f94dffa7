use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use super::run::{run_adapter_steps, StepOutput};
use super::{EncodedPair, TrainError};
use crate::lm::{continuation_logprobs, score_items, LmError, ModelHandle, ParamVars, ScoreItem};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::world::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            steps: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            clip_norm: None,
            adam: AdamConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Per-step training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// Mean of `beta * (chosen log-ratio - rejected log-ratio)`.
    pub margin: f64,
    /// Fraction of pairs with a positive margin.
    pub reward_accuracy: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub const CSV_HEADER: [&'static str; 5] = ["step", "loss", "margin", "reward_accuracy", "grad_norm"];
}

/// `-log(logistic(m))`, stable for large `|m|`.
pub fn pair_loss(margin: f64) -> f64 {
    if margin >= 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

/// DPO margin of one pair from its four summed log-probabilities.
pub fn dpo_margin(beta: f64, policy: (f64, f64), reference: (f64, f64)) -> f64 {
    beta * ((policy.0 - reference.0) - (policy.1 - reference.1))
}

/// `(chosen, rejected)` summed answer log-probabilities per pair.
pub fn pair_logprobs(model: &ModelHandle, bos: TokenId, batch: &[EncodedPair]) -> Result<Vec<(f64, f64)>, LmError> {
    let mut items = Vec::with_capacity(2 * batch.len());
    for p in batch {
        items.push(ScoreItem {
            prompt: &p.prompt,
            continuation: &p.chosen,
        });
        items.push(ScoreItem {
            prompt: &p.prompt,
            continuation: &p.rejected,
        });
    }
    let lp = score_items(model, bos, &items)?;
    Ok(lp.chunks(2).map(|c| (c[0], c[1])).collect())
}

fn stats_of(step: usize, margins: &[f64], grad_norm: f64) -> StepStats {
    let n = margins.len() as f64;
    StepStats {
        step,
        loss: margins.iter().map(|&m| pair_loss(m)).sum::<f64>() / n,
        margin: margins.iter().sum::<f64>() / n,
        reward_accuracy: margins.iter().filter(|&&m| m > 0.0).count() as f64 / n,
        grad_norm,
    }
}

/// Mean DPO loss of `policy` against a frozen `reference` on a batch.
pub fn dpo_loss(
    policy: &ModelHandle,
    reference: &ModelHandle,
    bos: TokenId,
    batch: &[EncodedPair],
    beta: f64,
) -> Result<(f64, StepStats), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let pol = pair_logprobs(policy, bos, batch)?;
    let refs = pair_logprobs(reference, bos, batch)?;
    let margins: Vec<f64> = pol.iter().zip(&refs).map(|(&p, &r)| dpo_margin(beta, p, r)).collect();
    if let Some(i) = margins.iter().position(|m| !m.is_finite()) {
        return Err(TrainError::NonFiniteLoss {
            step: 0,
            pair: batch[i].id.clone(),
        });
    }
    let stats = stats_of(0, &margins, 0.0);
    Ok((stats.loss, stats))
}

/// The DPO loss on a tape. `reference` holds the frozen `(chosen,
/// rejected)` log-probabilities of each pair. Returns the scalar loss and
/// the `[1, pairs]` margins.
pub fn dpo_objective<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    bos: TokenId,
    batch: &[EncodedPair],
    reference: &[(f64, f64)],
    beta: f64,
    dropout: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(Var, Var), LmError> {
    if batch.is_empty() || batch.len() != reference.len() {
        return Err(LmError::EmptyInput);
    }
    let b = batch.len();
    let mut items = Vec::with_capacity(2 * b);
    for p in batch {
        items.push(ScoreItem {
            prompt: &p.prompt,
            continuation: &p.chosen,
        });
    }
    for p in batch {
        items.push(ScoreItem {
            prompt: &p.prompt,
            continuation: &p.rejected,
        });
    }
    let lp = continuation_logprobs(tape, pv, bos, &items, dropout)?;
    let chosen = tape.slice_cols(lp, 0, b)?;
    let rejected = tape.slice_cols(lp, b, b)?;
    let diff = tape.sub(chosen, rejected)?;
    let offset: Vec<T> = reference.iter().map(|&(c, r)| T::from_f64(-(c - r))).collect();
    let offset = tape.constant(Tensor::new(vec![1, b], offset)?);
    let diff = tape.add(diff, offset)?;
    let margins = tape.scale(diff, beta)?;
    let ll = tape.log_logistic(margins)?;
    let m = tape.mean(ll)?;
    Ok((tape.scale(m, -1.0)?, margins))
}

/// Fine-tune the adapters of `base` with the DPO loss against `reference`.
///
/// Reference log-probabilities are computed once up front; the reference
/// handle is only read. Pairs are shuffled once with the config seed and
/// consumed in cyclic batches.
pub fn train_dpo(
    base: &ModelHandle,
    reference: &ModelHandle,
    bos: TokenId,
    pairs: &[EncodedPair],
    config: &DpoConfig,
) -> Result<(ModelHandle, Vec<StepStats>), TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let refs = pair_logprobs(reference, bos, pairs)?;
    run_adapter_steps(base, pairs.len(), config, |tape, pv, idx, rng| {
        let batch: Vec<EncodedPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let r: Vec<(f64, f64)> = idx.iter().map(|&i| refs[i]).collect();
        let (loss, margins) = dpo_objective(tape, pv, bos, &batch, &r, config.beta, Some(rng))?;
        let margins: Vec<f64> = tape.value(margins).data().iter().map(|&v| v as f64).collect();
        if let Some(j) = margins.iter().position(|m| !m.is_finite()) {
            return Ok(StepOutput::NonFinite(batch[j].id.clone()));
        }
        Ok(StepOutput::Loss(loss, margins))
    })
}
