//! End-to-end runs: pretraining, self-truthifying and the gradual
//! refine/update loop with persisted phase artifacts.

mod experiments;
mod grath;
mod ledger;
mod pretrain;

pub use experiments::{budget_sweep, reference_ablation, step_sweep, BudgetRow, ReferenceRow, StepRow};
pub use grath::{
    generate_initial_pairs, run_grath, run_self_truthify, select_questions, GrathOutcome, PhaseReport, PhaseResult, PipelineConfig,
    ReferencePolicy, SamplingSettings, DESK_DPO_LEARNING_RATE, Setting, StageSeeds, TemplateConfig, WorldConfig,
};
pub use ledger::{sha256_file, write_stats_csv, PhaseRecord, RunLedger, LEDGER_FILE};
pub use pretrain::{heldout_documents, pretrain, PretrainConfig, PretrainOutcome};

use crate::datagen::DatagenError;
use crate::eval::EvalError;
use crate::jsonl::JsonlError;
use crate::lm::{CheckpointError, LmError};
use crate::train::TrainError;
use crate::world::WorldError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("pretraining diverged at step {step}")]
    Diverged { step: usize },
    #[error("only {kept} pairs parsed, at least {needed} required ({summary})")]
    TooFewPairs { kept: usize, needed: usize, summary: String },
    #[error("OOD pool has {available} questions, {needed} requested")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}
