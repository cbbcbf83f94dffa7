use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use grath_core::lm::{AdapterSpec, ModelConfig, DEFAULT_CONTEXT};
use grath_core::pipeline::{
    PipelineConfig, PretrainConfig, ReferencePolicy, SamplingSettings, StageSeeds, TemplateConfig, WorldConfig,
};
use grath_core::train::{AdamConfig, DpoConfig};
use grath_core::world::CorpusConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory that default output paths
/// live under.
pub const OUTPUT_ROOT_ENV: &str = "GRATH_OUTPUT_ROOT";

/// Name of the fully resolved config written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub entities: usize,
    pub attributes: usize,
    pub mc_distractors: usize,
    pub heldout_docs: usize,
    pub corpus: CorpusConfig,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            entities: w.entities,
            attributes: w.attributes,
            mc_distractors: w.mc_distractors,
            heldout_docs: w.heldout_docs,
            corpus: w.corpus,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub context_length: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            context_length: DEFAULT_CONTEXT,
            model_dim: 64,
            num_layers: 2,
            num_heads: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub short_windows: usize,
    pub short_length: usize,
    pub long_windows: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            short_windows: p.short_windows,
            short_length: p.short_length,
            long_windows: p.long_windows,
            learning_rate: p.learning_rate,
            warmup_steps: p.warmup_steps,
            min_lr_ratio: p.min_lr_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoSection {
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for DpoSection {
    fn default() -> Self {
        let d = PipelineConfig::default().dpo;
        Self {
            beta: d.beta,
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            clip_norm: d.clip_norm,
            adam: d.adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub iterations: usize,
    pub pair_budget: usize,
    pub min_pairs: Option<usize>,
    pub reference_policy: ReferencePolicy,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            iterations: p.iterations,
            pair_budget: p.pair_budget,
            min_pairs: p.min_pairs,
            reference_policy: p.reference_policy,
        }
    }
}

/// Settings of the sweeps and the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub strengths: Vec<f64>,
    pub include_sft: bool,
    pub steps: Vec<usize>,
    pub budgets: Vec<usize>,
    /// Refine/update iterations of every budget-sweep run.
    pub budget_iterations: usize,
    pub ablation_iterations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            strengths: vec![0.0, 0.3, 0.6, 0.9],
            include_sft: true,
            steps: vec![50, 100, 200, 400],
            budgets: vec![64, 128, 256],
            budget_iterations: 3,
            ablation_iterations: 3,
        }
    }
}

/// Everything a run needs. One global seed drives the world, the model
/// initialization, pretraining and every pipeline stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub world: WorldSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub template: TemplateConfig,
    pub dpo: DpoSection,
    pub sampling: SamplingSettings,
    pub adapter: AdapterSpec,
    pub pipeline: PipelineSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            entities: self.world.entities,
            attributes: self.world.attributes,
            corpus: self.world.corpus.clone(),
            mc_distractors: self.world.mc_distractors,
            heldout_docs: self.world.heldout_docs,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_length: self.model.context_length,
            model_dim: self.model.model_dim,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            short_windows: p.short_windows,
            short_length: p.short_length,
            long_windows: p.long_windows,
            learning_rate: p.learning_rate,
            warmup_steps: p.warmup_steps,
            min_lr_ratio: p.min_lr_ratio,
            seed: self.seed,
            heldout_docs: self.world.heldout_docs,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let d = &self.dpo;
        PipelineConfig {
            iterations: self.pipeline.iterations,
            pair_budget: self.pipeline.pair_budget,
            min_pairs: self.pipeline.min_pairs,
            dpo: DpoConfig {
                beta: d.beta,
                steps: d.steps,
                batch_size: d.batch_size,
                learning_rate: d.learning_rate,
                seed: self.seed,
                clip_norm: d.clip_norm,
                adam: d.adam.clone(),
            },
            reference_policy: self.pipeline.reference_policy,
            template: self.template.clone(),
            sampling: self.sampling.clone(),
            adapter: self.adapter.clone(),
            seeds: StageSeeds::from_base(self.seed),
        }
    }

    /// Output directory: the flag, then the config, then a per-command
    /// directory under the output root.
    pub fn output_dir(&self, flag: Option<&Path>, command: &str) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{}-seed{}", command, self.seed))
    }
}
