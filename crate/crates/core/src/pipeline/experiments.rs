//! Recipes behind the sweep and ablation tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grath::{generate_initial_pairs, run_grath, PhaseResult, PipelineConfig, ReferencePolicy, Setting};
use super::PipelineError;
use crate::eval::{evaluate, pairwise_distances};
use crate::lm::{attach_adapters, ModelHandle};
use crate::par::map_runs;
use crate::seeds;
use crate::train::{encode_pairs, train_dpo, DpoConfig};

/// MC1 and friends after `steps` DPO steps on the iteration-0 pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub steps: usize,
    pub mc1: f64,
    pub mc2: Option<f64>,
    pub perplexity: Option<f64>,
    pub mean_distance: f64,
}

/// One phase of a run at a given pair budget. `dpo_phases` counts the
/// phases up to and including this one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: usize,
    pub pairs: usize,
    pub dpo_phases: usize,
    pub mc1: f64,
    pub mc2: Option<f64>,
    pub perplexity: Option<f64>,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub reference_policy: ReferencePolicy,
    pub phase: usize,
    pub mc1: f64,
    pub mc2: Option<f64>,
    pub perplexity: Option<f64>,
    pub parameter_distance: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn phase_distance(p: &PhaseResult) -> f64 {
    p.report.eval.pair_distance_stats.as_ref().map_or(f64::NAN, |s| s.mean)
}

/// Train fresh adapters on the same iteration-0 pairs for each step count.
pub fn step_sweep(
    pretrained: &ModelHandle,
    setting: &Setting,
    config: &PipelineConfig,
    steps: &[usize],
    parallel: bool,
) -> Result<Vec<StepRow>, PipelineError> {
    if steps.is_empty() || steps.contains(&0) {
        return Err(PipelineError::InvalidConfig("step counts must be positive".into()));
    }
    let (generated, _) = generate_initial_pairs(pretrained, setting, config)?;
    let vocab = setting.world.vocab();
    let encoded = encode_pairs(vocab, &generated.pairs)?;
    let mean_distance = mean(&pairwise_distances(pretrained, vocab, &generated.pairs)?);
    let base = attach_adapters(pretrained, &config.adapter, config.seeds.adapter)?;
    map_runs(steps, parallel, |&s| -> Result<StepRow, PipelineError> {
        let dpo = DpoConfig {
            steps: s,
            seed: seeds::derive(config.seeds.dpo, "phase", 0),
            ..config.dpo.clone()
        };
        let (model, _) = train_dpo(&base, pretrained, vocab.bos(), &encoded, &dpo)?;
        let r = evaluate(&model, &setting.eval_inputs(&format!("steps-{}", s), config.seeds.dpo))?;
        Ok(StepRow {
            steps: s,
            mc1: r.mc1,
            mc2: r.mc2,
            perplexity: r.heldout_perplexity,
            mean_distance,
        })
    })
    .into_iter()
    .collect()
}

/// A full run per budget, reporting every phase. Run directories go under
/// `out_dir/budget-{n}`.
pub fn budget_sweep(
    pretrained: &ModelHandle,
    setting: &Setting,
    config: &PipelineConfig,
    budgets: &[usize],
    out_dir: &Path,
    parallel: bool,
) -> Result<Vec<BudgetRow>, PipelineError> {
    let runs = map_runs(budgets, parallel, |&n| -> Result<Vec<BudgetRow>, PipelineError> {
        let cfg = PipelineConfig {
            pair_budget: n,
            min_pairs: config.min_pairs.map(|m| m.min(n)),
            ..config.clone()
        };
        let out = run_grath(pretrained, setting, &cfg, &out_dir.join(format!("budget-{}", n)))?;
        Ok(out
            .phases
            .iter()
            .map(|p| BudgetRow {
                budget: n,
                pairs: p.report.pairs,
                dpo_phases: p.report.phase + 1,
                mc1: p.report.eval.mc1,
                mc2: p.report.eval.mc2,
                perplexity: p.report.eval.heldout_perplexity,
                mean_distance: phase_distance(p),
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in runs {
        rows.extend(r?);
    }
    Ok(rows)
}

/// The same run under both reference policies, with run directories under
/// `out_dir/{policy}`.
pub fn reference_ablation(
    pretrained: &ModelHandle,
    setting: &Setting,
    config: &PipelineConfig,
    out_dir: &Path,
    parallel: bool,
) -> Result<Vec<ReferenceRow>, PipelineError> {
    let policies = [ReferencePolicy::CurrentBase, ReferencePolicy::FixedPretrained];
    let runs = map_runs(&policies, parallel, |&policy| -> Result<Vec<ReferenceRow>, PipelineError> {
        let cfg = PipelineConfig {
            reference_policy: policy,
            ..config.clone()
        };
        let out = run_grath(pretrained, setting, &cfg, &out_dir.join(policy.as_str()))?;
        Ok(out
            .phases
            .iter()
            .map(|p| ReferenceRow {
                reference_policy: policy,
                phase: p.report.phase,
                mc1: p.report.eval.mc1,
                mc2: p.report.eval.mc2,
                perplexity: p.report.eval.heldout_perplexity,
                parameter_distance: p.report.parameter_distance_from_pretrained,
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in runs {
        rows.extend(r?);
    }
    Ok(rows)
}
