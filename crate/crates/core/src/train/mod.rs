//! Preference (DPO) and supervised objectives, the optimizer and the
//! adapter fine-tuning loops.

mod dpo;
mod optim;
mod run;
mod sft;

pub use dpo::{dpo_loss, dpo_margin, dpo_objective, pair_logprobs, pair_loss, train_dpo, DpoConfig, StepStats};
pub use optim::{clip_grad_norm, grad_norm, optimizer_step, AdamConfig, AdamState};
pub use sft::{sft_loss, sft_objective, train_sft};

use crate::datagen::{scoring_prompt, TruthPair};
use crate::lm::LmError;
use crate::numerics::NumericsError;
use crate::world::{TokenId, Vocabulary, WorldError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("non-finite loss at step {step} (pair {pair})")]
    NonFiniteLoss { step: u64, pair: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// A pair tokenized for scoring: the bare question prompt and both answers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

pub fn encode_pairs(vocab: &Vocabulary, pairs: &[TruthPair]) -> Result<Vec<EncodedPair>, TrainError> {
    pairs
        .iter()
        .map(|p| {
            let chosen = vocab.encode(&p.correct_answer)?;
            let rejected = vocab.encode(&p.incorrect_answer)?;
            if chosen.is_empty() || rejected.is_empty() {
                return Err(TrainError::Lm(LmError::EmptyContinuation));
            }
            Ok(EncodedPair {
                id: p.id.clone(),
                prompt: vocab.encode(&scoring_prompt(&p.question))?,
                chosen,
                rejected,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
