use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::jsonl::write_atomic;
use crate::train::StepStats;

pub const LEDGER_FILE: &str = "ledger.json";

/// Artifacts of one DPO phase. Paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseRecord {
    pub phase: usize,
    pub reference: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub pairs: String,
    pub pairs_sha256: String,
    pub rejections: String,
    pub rejections_sha256: String,
    pub stats: String,
    pub report: String,
    pub report_sha256: String,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLedger {
    pub iterations: usize,
    pub reference_policy: String,
    pub phases: Vec<PhaseRecord>,
    pub final_checkpoint: String,
}

impl RunLedger {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Io(format!("{}: {}", path.display(), e)))
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("ledger serializes");
        Ok(write_atomic(path, text.as_bytes())?)
    }

    /// Every phase is present in order and every artifact exists under `dir`.
    pub fn is_complete(&self, dir: &Path) -> bool {
        self.phases.len() == self.iterations + 1
            && self.phases.iter().enumerate().all(|(i, p)| {
                p.phase == i
                    && [&p.checkpoint, &p.pairs, &p.rejections, &p.stats, &p.report]
                        .iter()
                        .all(|f| dir.join(f).exists())
            })
    }
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {}", path.display(), e)))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Step statistics as CSV with a header row.
pub fn write_stats_csv(path: &Path, stats: &[StepStats]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| PipelineError::Io(e.to_string());
    w.write_record(StepStats::CSV_HEADER).map_err(io)?;
    for s in stats {
        w.serialize((s.step, s.loss, s.margin, s.reward_accuracy, s.grad_norm)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Io(e.to_string()))?;
    Ok(write_atomic(path, &bytes)?)
}
