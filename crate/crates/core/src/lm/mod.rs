//! Small decoder-only causal language model with low-rank adapters.
//!
//! Pre-norm transformer blocks with learned positional embeddings, GELU
//! MLPs and a tied unembedding. Adapters attach to the attention query and
//! value projections. Scoring and representations run through the tape;
//! generation uses an inference-only decoder with a key/value cache.

mod checkpoint;
mod decode;
mod forward;
mod model;

pub use checkpoint::{
    decode_tensors, encode as encode_checkpoint, load_checkpoint, meta_of, save_checkpoint, sidecar_path,
    CheckpointError, CheckpointMeta, FORMAT_VERSION, MAGIC,
};
pub use decode::{sample_next, Decoder, DecoderState, Generation, SamplingPolicy, StopReason};
pub use forward::{
    continuation_logprobs, forward_hidden, logits, next_token_loss, set_trainable, target_logprobs, trainable_tensors,
    Packed, ParamVars, ScoreItem, Trainable,
};
pub use model::{
    adapter_targets, attach_adapters, init_model, layer_key, AdapterSet, AdapterSpec, ModelConfig, ModelHandle, RoleTag,
    DEFAULT_CONTEXT,
};

use crate::numerics::{NumericsError, Tape, Tensor};
use crate::world::TokenId;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("adapters are already attached")]
    AdaptersAttached,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("continuation must be non-empty")]
    EmptyContinuation,
    #[error("sequence of {len} tokens exceeds context length {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    OutOfVocabulary(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Items scored per forward pass.
const SCORE_CHUNK: usize = 64;

fn frozen_tape() -> Tape<f32> {
    Tape::new().with_finite_checks(false)
}

/// Per-position logits `[len, vocab]` for `tokens` exactly as given.
pub fn forward_logits(model: &ModelHandle, tokens: &[TokenId]) -> Result<Tensor, LmError> {
    let mut tape = frozen_tape();
    let pv = ParamVars::register(&mut tape, model, Trainable::Nothing);
    let mut packed = Packed::default();
    packed.push(tokens);
    let h = forward_hidden(&mut tape, &pv, &packed, None)?;
    let z = logits(&mut tape, &pv, h)?;
    Ok(tape.value(z).clone())
}

/// Summed log-probability of `continuation` after BOS and `prompt`.
pub fn sequence_logprob(
    model: &ModelHandle,
    bos: TokenId,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64, LmError> {
    Ok(score_items(model, bos, &[ScoreItem { prompt, continuation }])?[0])
}

/// [`sequence_logprob`] for many items, packed into few forward passes.
pub fn score_items(model: &ModelHandle, bos: TokenId, items: &[ScoreItem]) -> Result<Vec<f64>, LmError> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(SCORE_CHUNK) {
        let mut tape = frozen_tape();
        let pv = ParamVars::register(&mut tape, model, Trainable::Nothing);
        let lp = continuation_logprobs(&mut tape, &pv, bos, chunk, None)?;
        out.extend(tape.value(lp).data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Final-layer, last-position hidden state after BOS and `tokens`.
pub fn hidden_representation(model: &ModelHandle, bos: TokenId, tokens: &[TokenId]) -> Result<Vec<f32>, LmError> {
    Ok(hidden_representations(model, bos, &[tokens])?.remove(0))
}

pub fn hidden_representations(
    model: &ModelHandle,
    bos: TokenId,
    texts: &[&[TokenId]],
) -> Result<Vec<Vec<f32>>, LmError> {
    let d = model.config.model_dim;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(SCORE_CHUNK) {
        let mut packed = Packed::default();
        let mut last = Vec::with_capacity(chunk.len());
        for t in chunk {
            if t.is_empty() {
                return Err(LmError::EmptyInput);
            }
            let mut seq = vec![bos];
            seq.extend_from_slice(t);
            packed.push(&seq);
            last.push(packed.rows() - 1);
        }
        let mut tape = frozen_tape();
        let pv = ParamVars::register(&mut tape, model, Trainable::Nothing);
        let h = forward_hidden(&mut tape, &pv, &packed, None)?;
        let hd = tape.value(h).data();
        out.extend(last.iter().map(|&r| hd[r * d..(r + 1) * d].to_vec()));
    }
    Ok(out)
}

/// Mean per-token negative log-likelihood of each sequence after BOS,
/// returned as `(total nll, token count)`.
pub fn total_nll(model: &ModelHandle, bos: TokenId, sequences: &[Vec<TokenId>]) -> Result<(f64, usize), LmError> {
    let items: Vec<ScoreItem> = sequences
        .iter()
        .map(|s| ScoreItem {
            prompt: &[],
            continuation: s,
        })
        .collect();
    let lps = score_items(model, bos, &items)?;
    let count = sequences.iter().map(|s| s.len()).sum();
    Ok((-lps.iter().sum::<f64>(), count))
}

/// Sample a continuation of BOS and `prompt`.
pub fn sample_generate(
    model: &ModelHandle,
    bos: TokenId,
    prompt: &[TokenId],
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<Generation, LmError> {
    let dec = Decoder::new(model, bos);
    let st = dec.start(prompt)?;
    dec.generate(st, policy, seed)
}

#[cfg(test)]
mod tests;
