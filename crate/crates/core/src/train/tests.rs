use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::TruthPair;
use crate::lm::{attach_adapters, init_model, trainable_tensors, AdapterSpec, ModelConfig, ModelHandle, ParamVars, Trainable};
use crate::numerics::{grad_check, NumericsError, Tape, Tensor, Var};
use crate::world::{build_world, make_question_pools};

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        context_length: 8,
        model_dim: 8,
        num_layers: 1,
        num_heads: 2,
        seed,
    }
}

fn jitter(model: &ModelHandle, seed: u64, amount: f32) -> ModelHandle {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.base.values_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
    m
}

fn tiny_pairs() -> Vec<EncodedPair> {
    vec![
        EncodedPair {
            id: "a".into(),
            prompt: vec![1, 2],
            chosen: vec![3, 4],
            rejected: vec![5],
        },
        EncodedPair {
            id: "b".into(),
            prompt: vec![2],
            chosen: vec![1],
            rejected: vec![4, 4, 3],
        },
    ]
}

/// The first `n` OOD questions with their truth and misconception.
fn world_pairs(n: usize) -> (crate::world::FactWorld, Vec<TruthPair>) {
    let w = build_world(0, 60, 6).unwrap();
    let pools = make_question_pools(&w).unwrap();
    let pairs = pools.ood.records[..n]
        .iter()
        .map(|r| TruthPair {
            id: r.id.clone(),
            question: r.question.clone(),
            correct_answer: r.correct_answers[0].clone(),
            incorrect_answer: r.incorrect_answers[0].clone(),
            iteration_created: 0,
            correct_answer_iteration: 0,
            parse_ok: true,
            ground_truth_audit: None,
        })
        .collect();
    (w, pairs)
}

/// A full-size model with weights spread wide enough for adapters to move
/// its answer probabilities quickly, plus an adapted copy.
fn adapted_model(vocab: usize, seed: u64) -> (ModelHandle, ModelHandle) {
    let pre = jitter(&init_model(&ModelConfig::new(vocab, seed)).unwrap(), seed, 0.5);
    let base = attach_adapters(&pre, &AdapterSpec::default(), seed).unwrap();
    (pre, base)
}

#[test]
fn identical_policy_and_reference_give_ln2() {
    let m = jitter(&init_model(&tiny_config(0)).unwrap(), 1, 0.5);
    let (loss, stats) = dpo_loss(&m, &m, 0, &tiny_pairs(), 0.1).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
    assert_eq!(stats.margin, 0.0);
    assert_eq!(stats.reward_accuracy, 0.0);
}

#[test]
fn closed_form_margin_and_loss() {
    let m = dpo_margin(0.1, (-1.0, -3.0), (-2.0, -2.0));
    assert!((m - 0.2).abs() < 1e-12);
    // -ln(1 / (1 + e^-0.2)) evaluated in high precision.
    assert!((pair_loss(m) - 0.598_138_869_381_592_6).abs() < 1e-12);
}

#[test]
fn pair_loss_saturates_and_is_stable() {
    let mut prev = f64::INFINITY;
    for m in [-50.0, -5.0, 0.0, 5.0, 50.0, 800.0] {
        let l = pair_loss(m);
        assert!(l.is_finite() && l >= 0.0 && l < prev);
        prev = l;
    }
    assert!(pair_loss(800.0) < 1e-300);
    assert!((pair_loss(-800.0) - 800.0).abs() < 1e-9);
}

#[test]
fn empty_batches_are_rejected() {
    let m = init_model(&tiny_config(0)).unwrap();
    assert_eq!(dpo_loss(&m, &m, 0, &[], 0.1), Err(TrainError::EmptyBatch));
    assert_eq!(sft_loss(&m, 0, &[]), Err(TrainError::EmptyBatch));
}

#[test]
fn uniform_model_sft_loss_is_ln_vocab() {
    let mut m = init_model(&ModelConfig {
        vocab_size: 4,
        ..tiny_config(0)
    })
    .unwrap();
    for t in m.base.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let batch = vec![EncodedPair {
        id: "x".into(),
        prompt: vec![1],
        chosen: vec![2, 3, 1],
        rejected: vec![0],
    }];
    assert!((sft_loss(&m, 0, &batch).unwrap() - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn sft_loss_matches_token_by_token_computation() {
    let m = jitter(&init_model(&tiny_config(3)).unwrap(), 3, 1.0);
    let p = EncodedPair {
        id: "x".into(),
        prompt: vec![1, 2],
        chosen: vec![3, 4, 5],
        rejected: vec![0],
    };
    let mut by_hand = 0.0;
    let mut seq = vec![0, 1, 2];
    for &t in &p.chosen {
        let z = crate::lm::forward_logits(&m, &seq).unwrap();
        let row: Vec<f64> = z.data()[(seq.len() - 1) * 6..seq.len() * 6].iter().map(|&v| v as f64).collect();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        by_hand += lse - row[t as usize];
        seq.push(t);
    }
    assert!((sft_loss(&m, 0, &[p]).unwrap() - by_hand / 3.0).abs() < 1e-5);
}

fn dpo_gradient_error<T: crate::numerics::Scalar>(step: f64) -> f64 {
    let reference = jitter(&init_model(&tiny_config(5)).unwrap(), 5, 0.5);
    let policy = jitter(&reference, 6, 0.3);
    let batch = tiny_pairs();
    let refs = pair_logprobs(&reference, 0, &batch).unwrap();
    let params: Vec<Tensor<T>> = trainable_tensors(&policy, Trainable::Base)
        .into_iter()
        .map(|(_, t)| t.cast::<T>())
        .collect();
    let f = |tape: &mut Tape<T>, vars: &[Var]| -> Result<Var, NumericsError> {
        let pv = ParamVars::bind(tape, &policy, Trainable::Base, vars);
        dpo_objective(tape, &pv, 0, &batch, &refs, 1.0, None)
            .map(|(l, _)| l)
            .map_err(|e| match e {
                crate::lm::LmError::Numerics(n) => n,
                other => panic!("{}", other),
            })
    };
    grad_check(f, &params, step).unwrap()
}

#[test]
fn dpo_gradient_matches_finite_differences_f64() {
    let err = dpo_gradient_error::<f64>(1e-5);
    assert!(err < 1e-6, "{}", err);
}

#[test]
fn dpo_gradient_matches_finite_differences_f32() {
    let err = dpo_gradient_error::<f32>(1e-3);
    assert!(err < 1e-3, "{}", err);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
    let g = vec![Tensor::vector(vec![0.0, 0.0])];
    let mut st = AdamState::new(&p);
    optimizer_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(p[0].data(), &[1.0, -2.0]);
}

#[test]
fn single_adam_step_matches_hand_arithmetic() {
    // m = 0.1 g, v = 0.001 g^2; corrected m = g, v = g^2; step = lr g / (|g| + eps).
    let mut p = vec![Tensor::scalar(0.5)];
    let mut st = AdamState::new(&p);
    let cfg = AdamConfig::default();
    optimizer_step(&mut p, &[Tensor::scalar(2.0)], &mut st, 0.01, &cfg).unwrap();
    let expected = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
    assert!((p[0].item() as f64 - expected).abs() < 1e-7);
    assert_eq!(st.step, 1);
}

#[test]
fn constant_gradient_steps_approach_lr() {
    let mut p = vec![Tensor::scalar(0.0)];
    let mut st = AdamState::new(&p);
    let mut last = 0.0;
    for _ in 0..200 {
        let before = p[0].item() as f64;
        optimizer_step(&mut p, &[Tensor::scalar(-3.0)], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        last = p[0].item() as f64 - before;
    }
    assert!((last - 1e-3).abs() < 1e-5, "{}", last);
}

#[test]
fn non_finite_gradient_is_an_error() {
    let mut p = vec![Tensor::scalar(0.0)];
    let mut st = AdamState::new(&p);
    let r = optimizer_step(&mut p, &[Tensor::scalar(f32::NAN)], &mut st, 1e-3, &AdamConfig::default());
    assert_eq!(r, Err(TrainError::NonFiniteGradient { step: 0 }));
}

#[test]
fn clipping_bounds_the_norm() {
    let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
}

#[test]
fn training_starts_at_ln2_and_learns_a_fixed_batch() {
    let (w, pairs) = world_pairs(8);
    let enc = encode_pairs(w.vocab(), &pairs).unwrap();
    let (pre, base) = adapted_model(w.vocab().len(), 0);
    let cfg = DpoConfig {
        steps: 50,
        batch_size: 8,
        ..DpoConfig::default()
    };
    let (_, stats) = train_dpo(&base, &pre, w.vocab().bos(), &enc, &cfg).unwrap();
    assert_eq!(stats.len(), 50);
    assert!((stats[0].loss - std::f64::consts::LN_2).abs() < 1e-4);
    let last = stats.last().unwrap();
    assert!(last.loss < 0.5 * stats[0].loss, "{:?}", last);
    assert_eq!(last.reward_accuracy, 1.0);
}

#[test]
fn training_only_moves_adapters_and_is_deterministic() {
    let (w, pairs) = world_pairs(6);
    let enc = encode_pairs(w.vocab(), &pairs).unwrap();
    let (pre, base) = adapted_model(w.vocab().len(), 1);
    let snapshot = pre.clone();
    let cfg = DpoConfig {
        steps: 5,
        ..DpoConfig::default()
    };
    let (a, _) = train_dpo(&base, &pre, w.vocab().bos(), &enc, &cfg).unwrap();
    let (b, _) = train_dpo(&base, &pre, w.vocab().bos(), &enc, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.base, base.base);
    assert_ne!(a.adapters, base.adapters);
    assert_eq!(pre, snapshot);
}

#[test]
fn training_requires_adapters_and_pairs() {
    let (w, pairs) = world_pairs(2);
    let enc = encode_pairs(w.vocab(), &pairs).unwrap();
    let (pre, base) = adapted_model(w.vocab().len(), 0);
    let cfg = DpoConfig {
        steps: 1,
        ..DpoConfig::default()
    };
    assert!(train_dpo(&pre, &pre, 0, &enc, &cfg).is_err());
    assert_eq!(train_dpo(&base, &pre, 0, &[], &cfg).unwrap_err(), TrainError::EmptyBatch);
    let bad = DpoConfig {
        beta: 0.0,
        ..cfg.clone()
    };
    assert!(matches!(train_dpo(&base, &pre, 0, &enc, &bad), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn sft_loss_decreases_and_ignores_incorrect_answers() {
    let (w, pairs) = world_pairs(8);
    let enc = encode_pairs(w.vocab(), &pairs).unwrap();
    let (_, base) = adapted_model(w.vocab().len(), 2);
    let cfg = DpoConfig {
        steps: 20,
        batch_size: 8,
        ..DpoConfig::default()
    };
    let (a, stats) = train_sft(&base, w.vocab().bos(), &enc, &cfg).unwrap();
    for s in stats.windows(2) {
        assert!(s[1].loss < s[0].loss, "{:?}", s);
    }
    let mut other = enc.clone();
    for p in &mut other {
        p.rejected = vec![w.vocab().id("red").unwrap(), w.vocab().id("gold").unwrap()];
    }
    let (b, _) = train_sft(&base, w.vocab().bos(), &other, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stats_csv_header() {
    assert_eq!(StepStats::CSV_HEADER, ["step", "loss", "margin", "reward_accuracy", "grad_norm"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_loss_is_decreasing_and_positive(a in -40.0f64..40.0, d in 1e-3f64..10.0) {
        prop_assert!(pair_loss(a) > 0.0);
        prop_assert!(pair_loss(a + d) < pair_loss(a));
    }

    #[test]
    fn margin_ignores_shared_offsets(c in -5.0f64..5.0, pt in -9.0f64..0.0, pf in -9.0f64..0.0, rt in -9.0f64..0.0, rf in -9.0f64..0.0) {
        let a = dpo_margin(0.1, (pt, pf), (rt, rf));
        let b = dpo_margin(0.1, (pt + c, pf + c), (rt, rf));
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn beta_enters_only_through_the_product(c in 0.1f64..10.0, pt in -9.0f64..0.0, pf in -9.0f64..0.0, rt in -9.0f64..0.0, rf in -9.0f64..0.0) {
        let a = dpo_margin(0.1, (pt, pf), (rt, rf));
        let b = dpo_margin(0.1 * c, (pt / c, pf / c), (rt / c, rf / c));
        prop_assert!((pair_loss(a) - pair_loss(b)).abs() < 1e-9);
    }

    #[test]
    fn loss_is_mean_of_pair_losses(seed in 0u64..50) {
        let reference = jitter(&init_model(&tiny_config(seed)).unwrap(), seed, 0.5);
        let policy = jitter(&reference, seed + 1, 0.3);
        let batch = tiny_pairs();
        let (loss, stats) = dpo_loss(&policy, &reference, 0, &batch, 0.1).unwrap();
        let pol = pair_logprobs(&policy, 0, &batch).unwrap();
        let refs = pair_logprobs(&reference, 0, &batch).unwrap();
        let mean = pol.iter().zip(&refs).map(|(&p, &r)| pair_loss(dpo_margin(0.1, p, r))).sum::<f64>() / 2.0;
        prop_assert!((loss - mean).abs() < 1e-6);
        prop_assert!((stats.loss - loss).abs() < 1e-12);
    }
}
