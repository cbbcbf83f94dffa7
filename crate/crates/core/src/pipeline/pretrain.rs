use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::lm::{init_model, next_token_loss, set_trainable, trainable_tensors, ModelConfig, ModelHandle, ParamVars, RoleTag, Trainable};
use crate::numerics::Tape;
use crate::seeds;
use crate::train::{optimizer_step, AdamConfig, AdamState};
use crate::world::{CorpusConfig, FactWorld, TokenId};

use crate::eval::heldout_perplexity;
use crate::world::{make_heldout_corpus, make_pretrain_corpus};

/// Next-token training schedule. Every step mixes short windows, which
/// carry most of the signal cheaply, with a few full-context windows so
/// that every position embedding is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub short_windows: usize,
    pub short_length: usize,
    /// Windows per step of the model's full context length.
    pub long_windows: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of the peak rate.
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Held-out documents used for perplexity.
    pub heldout_docs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            short_windows: 16,
            short_length: 64,
            long_windows: 2,
            learning_rate: 1e-2,
            warmup_steps: 50,
            min_lr_ratio: 0.1,
            seed: 0,
            heldout_docs: 400,
        }
    }
}

impl PretrainConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warm = ((step + 1) as f64 / self.warmup_steps.max(1) as f64).min(1.0);
        let progress = step as f64 / self.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * warm * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.steps == 0 || self.short_windows + self.long_windows == 0 || self.short_length < 2 {
            return Err(PipelineError::InvalidConfig("pretraining needs steps and windows of length >= 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(PipelineError::InvalidConfig("bad pretraining learning rate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: ModelHandle,
    pub losses: Vec<f64>,
    pub heldout_perplexity: f64,
}

/// Held-out documents, each tokenized on its own.
pub fn heldout_documents(world: &FactWorld, corpus: &CorpusConfig, limit: usize) -> Result<Vec<Vec<TokenId>>, PipelineError> {
    let c = make_heldout_corpus(world, corpus, limit)?;
    Ok(c.docs.iter().map(|d| world.encode(&d.text)).collect::<Result<_, _>>()?)
}

/// Train a fresh model on the world's corpus and measure held-out perplexity.
pub fn pretrain(
    world: &FactWorld,
    model_config: &ModelConfig,
    corpus_config: &CorpusConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome, PipelineError> {
    config.validate()?;
    let corpus = make_pretrain_corpus(world, corpus_config)?;
    let (stream, starts) = corpus.token_stream(world)?;
    let bos = world.vocab().bos();
    let long = model_config.context_length;
    let short = config.short_length.min(long);

    let mut model = init_model(model_config)?;
    let mut params: Vec<_> = trainable_tensors(&model, Trainable::Base).into_iter().map(|x| x.1).collect();
    let mut state = AdamState::new(&params);
    let adam = AdamConfig::default();
    let mut rng = seeds::rng(config.seed, "pretrain-windows", 0);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let windows: Vec<Vec<TokenId>> = (0..config.short_windows + config.long_windows)
            .map(|w| {
                let len = if w < config.short_windows { short } else { long };
                let s = starts[rng.gen_range(0..starts.len())];
                let e = (s + len - 1).min(stream.len());
                let mut win = Vec::with_capacity(len);
                win.push(bos);
                win.extend_from_slice(&stream[s..e]);
                win
            })
            .filter(|w| w.len() >= 2)
            .collect();
        let mut tape = Tape::<f32>::new().with_finite_checks(false);
        let pv = ParamVars::register(&mut tape, &model, Trainable::Base);
        let loss = next_token_loss(&mut tape, &pv, &windows, None)?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(PipelineError::Diverged { step });
        }
        losses.push(lv);
        let mut grads = tape.backward(loss).map_err(crate::lm::LmError::from)?;
        let g: Vec<_> = pv.trainable().iter().map(|&v| grads.take(v).expect("gradient")).collect();
        optimizer_step(&mut params, &g, &mut state, config.learning_rate_at(step), &adam)
            .map_err(|_| PipelineError::Diverged { step })?;
        set_trainable(&mut model, Trainable::Base, params.clone());
    }
    let model = model.with_role(RoleTag::Pretrained);
    let heldout = heldout_documents(world, corpus_config, config.heldout_docs)?;
    let heldout_perplexity = heldout_perplexity(&model, bos, &heldout)?;
    Ok(PretrainOutcome {
        model,
        losses,
        heldout_perplexity,
    })
}
