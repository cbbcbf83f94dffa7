//! Few-shot prompting, pair generation and filtering, refinement of
//! correct answers, answer perturbation and ground-truth audits.

mod audit;
mod generate;
mod parse;
mod perturb;
mod prompt;

pub use audit::{audit_pairs, AuditReport, IterationRates, PairAudit};
pub use generate::{generate_pairs, refine_pairs, GenerationOutcome, QuestionItem, Rejection};
pub use parse::{parse_response, RejectReason, CORRECT_PREFIX, INCORRECT_PREFIX};
pub use perturb::{perturb_answers, PerturbationConfig, PerturbationScope};
pub use prompt::{
    render_prompt, render_prompt_with_candidates, scoring_prompt, Demonstration, DemoDomain, PromptTemplate,
    DEFAULT_DEMOS,
};

use serde::{Deserialize, Serialize};

use crate::lm::LmError;
use crate::world::WorldError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("a template needs at least one demonstration")]
    NoDemonstrations,
    #[error("demonstration {index} does not parse: {reason}")]
    BadDemonstration { index: usize, reason: RejectReason },
    #[error("empty question")]
    EmptyQuestion,
    #[error("empty candidate answer")]
    EmptyCandidate,
    #[error("pool has {available} records, {needed} demonstrations requested")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("perturbation strength {0} is outside [0, 1]")]
    BadStrength(f64),
    #[error("question not found in the world: {0}")]
    UnknownQuestion(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Ground-truth labels of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub correct_is_true: bool,
    pub incorrect_is_false: bool,
}

/// A question with a preferred (correct) and a dispreferred (incorrect)
/// answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthPair {
    pub id: String,
    pub question: String,
    pub correct_answer: String,
    pub incorrect_answer: String,
    pub iteration_created: usize,
    pub correct_answer_iteration: usize,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_audit: Option<GroundTruth>,
}
