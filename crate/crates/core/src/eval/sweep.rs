use serde::{Deserialize, Serialize};

use super::distance::pairwise_distances;
use super::{evaluate, EvalError, EvalInputs};
use crate::datagen::{perturb_answers, PerturbationConfig, TruthPair};
use crate::lm::{attach_adapters, AdapterSpec, ModelHandle};
use crate::par::map_runs;
use crate::train::{encode_pairs, train_dpo, train_sft, DpoConfig};
use crate::world::FactWorld;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub dpo: DpoConfig,
    pub adapter: AdapterSpec,
    pub adapter_seed: u64,
    pub perturbation_seed: u64,
    /// Also train a supervised baseline at every strength.
    pub include_sft: bool,
    /// Run the strengths on separate threads.
    pub parallel: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMethod {
    Dpo,
    Sft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub strength: f64,
    pub method: GapMethod,
    pub mc1: f64,
    pub mc2: Option<f64>,
    pub perplexity: Option<f64>,
    pub mean_distance: f64,
}

/// Perturb the answers at each strength, fine-tune fresh adapters on the
/// pretrained model and score the result. Distances use the pretrained
/// model as the probe.
pub fn domain_gap_sweep(
    pretrained: &ModelHandle,
    world: &FactWorld,
    pairs: &[TruthPair],
    strengths: &[f64],
    config: &SweepConfig,
    inputs: &EvalInputs,
) -> Result<Vec<GapRow>, EvalError> {
    if !strengths.windows(2).all(|w| w[0] < w[1]) || !strengths.contains(&0.0) {
        return Err(EvalError::BadStrengths);
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let bos = world.vocab().bos();
    let at = |&s: &f64| -> Result<Vec<GapRow>, EvalError> {
        let perturbed = perturb_answers(pairs, &PerturbationConfig::new(s, config.perturbation_seed), world)?;
        let encoded = encode_pairs(world.vocab(), &perturbed)?;
        let d = pairwise_distances(pretrained, world.vocab(), &perturbed)?;
        let mean_distance = d.iter().sum::<f64>() / d.len() as f64;
        let base = attach_adapters(pretrained, &config.adapter, config.adapter_seed)?;
        let mut runs = vec![(GapMethod::Dpo, train_dpo(&base, pretrained, bos, &encoded, &config.dpo)?.0)];
        if config.include_sft {
            runs.push((GapMethod::Sft, train_sft(&base, bos, &encoded, &config.dpo)?.0));
        }
        let mut rows = Vec::new();
        for (method, model) in runs {
            let r = evaluate(&model, inputs)?;
            rows.push(GapRow {
                strength: s,
                method,
                mc1: r.mc1,
                mc2: r.mc2,
                perplexity: r.heldout_perplexity,
                mean_distance,
            });
        }
        Ok(rows)
    };
    let mut rows = Vec::new();
    for r in map_runs(strengths, config.parallel, at) {
        rows.extend(r?);
    }
    Ok(rows)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side has no variation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs equal lengths");
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
