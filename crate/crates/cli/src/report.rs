use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use grath_core::pipeline::{PhaseReport, RunLedger, LEDGER_FILE};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

/// One phase, flattened for tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub phase: usize,
    pub dpo_phases: usize,
    pub reference: String,
    pub pairs: usize,
    pub rejections: usize,
    pub substituted: usize,
    pub final_loss: f64,
    pub final_reward_accuracy: f64,
    pub parameter_distance: f64,
    pub mc1: f64,
    pub mc2: Option<f64>,
    pub mc2_nan: bool,
    pub perplexity: Option<f64>,
    pub mean_distance: Option<f64>,
    pub correct_true_rate: Option<f64>,
    pub incorrect_false_rate: Option<f64>,
}

impl From<&PhaseReport> for PhaseRow {
    fn from(r: &PhaseReport) -> Self {
        Self {
            phase: r.phase,
            dpo_phases: r.phase + 1,
            reference: r.reference.clone(),
            pairs: r.pairs,
            rejections: r.rejections,
            substituted: r.substituted,
            final_loss: r.final_loss,
            final_reward_accuracy: r.final_reward_accuracy,
            parameter_distance: r.parameter_distance_from_pretrained,
            mc1: r.eval.mc1,
            mc2: r.eval.mc2,
            mc2_nan: r.eval.mc2_nan,
            perplexity: r.eval.heldout_perplexity,
            mean_distance: r.eval.pair_distance_stats.as_ref().map(|s| s.mean),
            correct_true_rate: r.audit.correct_rate,
            incorrect_false_rate: r.audit.incorrect_rate,
        }
    }
}

/// Phase rows of a finished run directory.
pub fn load_rows(run_dir: &Path) -> Result<Vec<PhaseRow>> {
    let ledger = RunLedger::load(&run_dir.join(LEDGER_FILE))?;
    if !ledger.is_complete(run_dir) {
        bail!(
            "incomplete ledger in {}: {} of {} phases",
            run_dir.display(),
            ledger.phases.len(),
            ledger.iterations + 1
        );
    }
    ledger
        .phases
        .iter()
        .map(|p| {
            let path = run_dir.join(&p.report);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report: PhaseReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            Ok(PhaseRow::from(&report))
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{:.4}", x))
}

fn markdown(rows: &[PhaseRow]) -> String {
    let mut s = String::from(
        "| DPO phases | reference | pairs | substituted | MC1 | MC2 | perplexity | mean d_pair | param distance |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} | {} | {} | {} | {:.4} |",
            r.dpo_phases,
            r.reference,
            r.pairs,
            r.substituted,
            r.mc1,
            if r.mc2_nan { "NaN".to_string() } else { cell(r.mc2) },
            cell(r.perplexity),
            cell(r.mean_distance),
            r.parameter_distance
        );
    }
    s
}

pub fn emit_report(run_dir: &Path, format: ReportFormat) -> Result<String> {
    let rows = load_rows(run_dir)?;
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
        ReportFormat::Csv => to_csv(&rows)?,
        ReportFormat::Markdown => markdown(&rows),
    })
}
