use super::dpo::{DpoConfig, StepStats};
use super::run::{run_adapter_steps, StepOutput};
use super::{EncodedPair, TrainError};
use crate::lm::{continuation_logprobs, score_items, LmError, ModelHandle, ParamVars, ScoreItem};
use crate::numerics::{Scalar, Tape, Var};
use crate::world::TokenId;

/// Mean per-token negative log-likelihood of the correct answers.
pub fn sft_loss(policy: &ModelHandle, bos: TokenId, batch: &[EncodedPair]) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let items: Vec<ScoreItem> = batch
        .iter()
        .map(|p| ScoreItem {
            prompt: &p.prompt,
            continuation: &p.chosen,
        })
        .collect();
    let lp = score_items(policy, bos, &items)?;
    let tokens: usize = batch.iter().map(|p| p.chosen.len()).sum();
    Ok(-lp.iter().sum::<f64>() / tokens as f64)
}

/// [`sft_loss`] on a tape.
pub fn sft_objective<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    bos: TokenId,
    batch: &[EncodedPair],
    dropout: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Var, LmError> {
    if batch.is_empty() {
        return Err(LmError::EmptyInput);
    }
    let items: Vec<ScoreItem> = batch
        .iter()
        .map(|p| ScoreItem {
            prompt: &p.prompt,
            continuation: &p.chosen,
        })
        .collect();
    let tokens: usize = batch.iter().map(|p| p.chosen.len()).sum();
    let lp = continuation_logprobs(tape, pv, bos, &items, dropout)?;
    let s = tape.sum(lp)?;
    Ok(tape.scale(s, -1.0 / tokens as f64)?)
}

/// Fine-tune the adapters of `base` on the correct answers only, with the
/// same batching and optimizer as DPO. `beta` is unused. Stats carry the
/// loss and gradient norm; margins are zero.
pub fn train_sft(
    base: &ModelHandle,
    bos: TokenId,
    pairs: &[EncodedPair],
    config: &DpoConfig,
) -> Result<(ModelHandle, Vec<StepStats>), TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    run_adapter_steps(base, pairs.len(), config, |tape, pv, idx, rng| {
        let batch: Vec<EncodedPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let loss = sft_objective(tape, pv, bos, &batch, Some(rng))?;
        Ok(StepOutput::Plain(loss))
    })
}
