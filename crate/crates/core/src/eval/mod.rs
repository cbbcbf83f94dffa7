//! Multiple-choice truthfulness scores, held-out perplexity, answer-pair
//! distance analytics and the domain-gap sweep.

mod distance;
mod metrics;
mod sweep;

pub use distance::{
    distance_shift_report, pairwise_distance, pairwise_distances, summarize, DistanceReport, DistanceStats, HistogramBin,
    ShiftReport, HISTOGRAM_BINS,
};
pub use metrics::{
    heldout_perplexity, mc1_from_scores, mc2_from_scores, option_scores, score_mc1, score_mc2, ItemScores, Mc2Score,
};
pub use sweep::{domain_gap_sweep, spearman, GapMethod, GapRow, SweepConfig};

use serde::{Deserialize, Serialize};

use crate::lm::LmError;
use crate::train::TrainError;
use crate::world::{McQuestion, TokenId, Vocabulary, WorldError};
use crate::datagen::DatagenError;
use crate::lm::ModelHandle;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty benchmark")]
    EmptyBenchmark,
    #[error("item {id} has {count} correct answers, MC1 needs exactly one")]
    NotSingleCorrect { id: String, count: usize },
    #[error("item {id} needs at least one correct and one incorrect answer")]
    MissingOptions { id: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty answer")]
    EmptyAnswer,
    #[error("empty pair list")]
    EmptyPairs,
    #[error("strengths must be ascending and contain 0")]
    BadStrengths,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_id: String,
    pub benchmark_id: String,
    pub seed: u64,
}

/// Scores of one model on one benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mc1: f64,
    /// `None` exactly when `mc2_nan` is set.
    pub mc2: Option<f64>,
    pub mc2_nan: bool,
    pub heldout_perplexity: Option<f64>,
    pub pair_distance_stats: Option<DistanceStats>,
    pub metadata: ReportMeta,
}

/// What a report is computed against.
pub struct EvalInputs<'a> {
    pub vocab: &'a Vocabulary,
    pub benchmark: &'a [McQuestion],
    /// Held-out documents for perplexity, if any.
    pub heldout: Option<&'a [Vec<TokenId>]>,
    pub meta: ReportMeta,
}

/// MC1, MC2 and (optionally) held-out perplexity of `model`.
pub fn evaluate(model: &ModelHandle, inputs: &EvalInputs) -> Result<EvalReport, EvalError> {
    let scores = option_scores(model, inputs.vocab, inputs.benchmark)?;
    let mc1 = mc1_from_scores(&scores);
    let mc2 = mc2_from_scores(&scores);
    let heldout_perplexity = match inputs.heldout {
        Some(docs) => Some(heldout_perplexity(model, inputs.vocab.bos(), docs)?),
        None => None,
    };
    Ok(EvalReport {
        mc1,
        mc2: mc2.value,
        mc2_nan: mc2.nan_flag,
        heldout_perplexity,
        pair_distance_stats: None,
        metadata: inputs.meta.clone(),
    })
}

#[cfg(test)]
mod tests;
