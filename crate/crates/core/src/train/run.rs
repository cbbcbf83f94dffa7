use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::dpo::{pair_loss, DpoConfig, StepStats};
use super::optim::{clip_grad_norm, optimizer_step, AdamState};
use super::TrainError;
use crate::lm::{set_trainable, trainable_tensors, LmError, ModelHandle, ParamVars, Trainable};
use crate::numerics::{Tape, Var};
use crate::seeds;

pub(crate) enum StepOutput {
    /// Loss and per-pair margins.
    Loss(Var, Vec<f64>),
    /// Loss without margins.
    Plain(Var),
    /// A pair produced a non-finite margin.
    NonFinite(String),
}

/// Item indices of each step: one seeded shuffle, then cyclic batches.
pub(crate) fn batch_schedule(n: usize, config: &DpoConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(config.seed, "batch-order", 0));
    (0..config.steps)
        .map(|s| (0..config.batch_size).map(|j| order[(s * config.batch_size + j) % n]).collect())
        .collect()
}

/// Shared adapter training loop. `objective` builds the loss of one batch.
pub(crate) fn run_adapter_steps<F>(
    base: &ModelHandle,
    n: usize,
    config: &DpoConfig,
    mut objective: F,
) -> Result<(ModelHandle, Vec<StepStats>), TrainError>
where
    F: FnMut(&mut Tape<f32>, &ParamVars, &[usize], &mut ChaCha8Rng) -> Result<StepOutput, LmError>,
{
    if base.adapters.is_none() {
        return Err(TrainError::InvalidConfig("base model has no adapters attached".into()));
    }
    let mut model = base.clone();
    let mut params: Vec<_> = trainable_tensors(&model, Trainable::Adapters)
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let mut state = AdamState::new(&params);
    let mut dropout = seeds::rng(config.seed, "adapter-dropout", 0);
    let mut stats = Vec::with_capacity(config.steps);
    for (step, idx) in batch_schedule(n, config).into_iter().enumerate() {
        let mut tape = Tape::<f32>::new().with_finite_checks(false);
        let pv = ParamVars::register(&mut tape, &model, Trainable::Adapters);
        let (loss, margins) = match objective(&mut tape, &pv, &idx, &mut dropout)? {
            StepOutput::Loss(l, m) => (l, Some(m)),
            StepOutput::Plain(l) => (l, None),
            StepOutput::NonFinite(pair) => return Err(TrainError::NonFiniteLoss { step: step as u64, pair }),
        };
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: step as u64,
                pair: String::new(),
            });
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<_> = pv
            .trainable()
            .iter()
            .map(|&v| grads.take(v).expect("adapter gradient"))
            .collect();
        let norm = match config.clip_norm {
            Some(c) => clip_grad_norm(&mut g, c),
            None => super::optim::grad_norm(&g),
        };
        if !norm.is_finite() {
            return Err(TrainError::NonFiniteGradient { step: step as u64 });
        }
        optimizer_step(&mut params, &g, &mut state, config.learning_rate, &config.adam)?;
        set_trainable(&mut model, Trainable::Adapters, params.clone());
        stats.push(match margins {
            Some(m) => {
                let n = m.len() as f64;
                StepStats {
                    step,
                    loss: m.iter().map(|&x| pair_loss(x)).sum::<f64>() / n,
                    margin: m.iter().sum::<f64>() / n,
                    reward_accuracy: m.iter().filter(|&&x| x > 0.0).count() as f64 / n,
                    grad_norm: norm,
                }
            }
            None => StepStats {
                step,
                loss: loss_value,
                margin: 0.0,
                reward_accuracy: 0.0,
                grad_norm: norm,
            },
        });
    }
    Ok((model, stats))
}
