use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::TruthPair;
use crate::lm::{hidden_representation, init_model, ModelConfig};
use crate::world::{build_world, make_mc_benchmark, make_question_pools, FactWorld, QuestionPools};

fn scores(correct: f64, incorrect: &[f64]) -> ItemScores {
    ItemScores {
        correct: vec![correct],
        incorrect: incorrect.to_vec(),
    }
}

fn setup() -> (FactWorld, QuestionPools, ModelHandle) {
    let w = build_world(0, 60, 6).unwrap();
    let p = make_question_pools(&w).unwrap();
    let mut m = init_model(&ModelConfig::new(w.vocab().len(), 0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in m.base.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    (w, p, m)
}

fn pairs_of(pools: &QuestionPools, n: usize) -> Vec<TruthPair> {
    pools.ood.records[..n]
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
        .collect()
}

#[test]
fn mc1_counts_strict_wins() {
    assert_eq!(mc1_from_scores(&[scores(-1.2, &[-3.4, -5.0])]), 1.0);
    assert_eq!(mc1_from_scores(&[scores(-1.0, &[-1.0, -5.0])]), 0.0);
    let four = [
        scores(-1.0, &[-2.0]),
        scores(-1.0, &[-3.0]),
        scores(-1.0, &[-0.5]),
        scores(-0.1, &[-3.0]),
    ];
    assert_eq!(mc1_from_scores(&four), 0.75);
}

#[test]
fn mc2_normalizes_the_correct_mass() {
    let s = scores(0.3f64.ln(), &[0.1f64.ln(), 0.1f64.ln()]);
    let v = mc2_from_scores(&[s]);
    assert!((v.value.unwrap() - 0.6).abs() < 1e-12);
    assert!(!v.nan_flag);
    let sure = scores(-2.0, &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
    assert_eq!(mc2_from_scores(&[sure]).value, Some(1.0));
}

#[test]
fn mc2_without_mass_raises_the_flag() {
    let dead = scores(f64::NEG_INFINITY, &[f64::NEG_INFINITY]);
    let v = mc2_from_scores(&[scores(-1.0, &[-2.0]), dead]);
    assert_eq!(v, Mc2Score { value: None, nan_flag: true });
    let nan = scores(f64::NAN, &[-1.0]);
    assert!(mc2_from_scores(&[nan]).nan_flag);
}

#[test]
fn mc1_requires_one_correct_answer() {
    let (w, pools, m) = setup();
    let mut bench = make_mc_benchmark(&pools.in_domain_test, 3).unwrap();
    assert_eq!(score_mc1(&m, w.vocab(), &[]), Err(EvalError::EmptyBenchmark));
    bench[0].correct_answers.push("red".into());
    assert!(matches!(score_mc1(&m, w.vocab(), &bench), Err(EvalError::NotSingleCorrect { count: 2, .. })));
}

#[test]
fn option_scores_match_single_logprobs() {
    let (w, pools, m) = setup();
    let bench = make_mc_benchmark(&pools.in_domain_test, 3).unwrap();
    let s = option_scores(&m, w.vocab(), &bench[..3]).unwrap();
    for (item, sc) in bench.iter().zip(&s) {
        let prompt = w.encode(&crate::datagen::scoring_prompt(&item.question)).unwrap();
        let lp = crate::lm::sequence_logprob(&m, w.vocab().bos(), &prompt, &w.encode(&item.incorrect_answers[1]).unwrap()).unwrap();
        assert!((sc.incorrect[1] - lp).abs() < 1e-5);
    }
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let (w, pools, m) = setup();
    let before = m.clone();
    let bench = make_mc_benchmark(&pools.in_domain_test, 3).unwrap();
    let inputs = EvalInputs {
        vocab: w.vocab(),
        benchmark: &bench,
        heldout: None,
        meta: ReportMeta {
            model_id: "m".into(),
            benchmark_id: "b".into(),
            seed: 0,
        },
    };
    let r = evaluate(&m, &inputs).unwrap();
    assert_eq!(m, before);
    assert!((0.0..=1.0).contains(&r.mc1));
    assert_eq!(r.mc2.is_none(), r.mc2_nan);
    assert_eq!(r.heldout_perplexity, None);
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let mut m = init_model(&ModelConfig {
        context_length: 8,
        model_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ..ModelConfig::new(7, 0)
    })
    .unwrap();
    for t in m.base.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let p = heldout_perplexity(&m, 0, &[vec![1, 2, 3], vec![4, 5]]).unwrap();
    assert!((p - 7.0).abs() < 1e-4);
    assert_eq!(heldout_perplexity(&m, 0, &[]), Err(EvalError::EmptyCorpus));
}

#[test]
fn perplexity_matches_hand_computation() {
    let (w, _, m) = setup();
    let doc = w.encode("the color of").unwrap();
    let doc: Vec<_> = doc.iter().chain(&w.encode("red . the").unwrap()).copied().collect();
    assert_eq!(doc.len(), 6);
    let mut seq = vec![w.vocab().bos()];
    let mut nll = 0.0;
    let v = w.vocab().len();
    for &t in &doc {
        let z = crate::lm::forward_logits(&m, &seq).unwrap();
        let row: Vec<f64> = z.data()[(seq.len() - 1) * v..seq.len() * v].iter().map(|&x| x as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        nll += lse - row[t as usize];
        seq.push(t);
    }
    let expected = (nll / doc.len() as f64).exp();
    let got = heldout_perplexity(&m, w.vocab().bos(), &[doc]).unwrap();
    assert!((got - expected).abs() / expected < 1e-5);
}

#[test]
fn identical_answers_are_at_distance_zero() {
    let (w, pools, m) = setup();
    let mut p = pairs_of(&pools, 1).remove(0);
    p.incorrect_answer = p.correct_answer.clone();
    assert_eq!(pairwise_distance(&m, w.vocab(), &p).unwrap(), 0.0);
}

#[test]
fn batched_distances_match_pair_by_pair() {
    let (w, pools, m) = setup();
    let pairs = pairs_of(&pools, 70);
    let batch = pairwise_distances(&m, w.vocab(), &pairs).unwrap();
    let bos = w.vocab().bos();
    let mut total = 0.0;
    for (p, &d) in pairs.iter().zip(&batch) {
        let a = hidden_representation(&m, bos, &w.encode(&p.correct_answer).unwrap()).unwrap();
        let b = hidden_representation(&m, bos, &w.encode(&p.incorrect_answer).unwrap()).unwrap();
        let by_hand = a.iter().zip(&b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
        assert!((d - by_hand).abs() < 1e-4);
        assert!(d > 0.0);
        total += by_hand;
    }
    let stats = summarize(&batch, HISTOGRAM_BINS);
    assert!((stats.mean - total / pairs.len() as f64).abs() < 1e-4);
}

#[test]
fn empty_answer_is_an_error() {
    let (w, pools, m) = setup();
    let mut p = pairs_of(&pools, 1).remove(0);
    p.correct_answer = String::new();
    assert_eq!(pairwise_distance(&m, w.vocab(), &p), Err(EvalError::EmptyAnswer));
}

#[test]
fn summary_statistics_by_hand() {
    let s = summarize(&[1.0, 2.0, 3.0, 4.0], 3);
    assert_eq!(s.count, 4);
    assert_eq!(s.mean, 2.5);
    assert_eq!(s.median, 2.5);
    assert!((s.stddev - 1.25f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.histogram.len(), 3);
    assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 4);
    assert_eq!(s.histogram[0].bin_low, 1.0);
    assert_eq!(s.histogram[2].bin_high, 4.0);
}

#[test]
fn shift_report_signs() {
    let (w, pools, m) = setup();
    let pairs = pairs_of(&pools, 10);
    let same = distance_shift_report(&m, "probe", w.vocab(), &pairs, &pairs).unwrap();
    assert_eq!(same.shift, 0.0);
    assert_eq!(same.before.probe_id, "probe");
    assert!(distance_shift_report(&m, "probe", w.vocab(), &[], &pairs).is_err());
}

#[test]
fn spearman_by_hand() {
    assert_eq!(spearman(&[0.0, 0.3, 0.6, 0.9], &[4.0, 3.0, 2.0, 1.0]), -1.0);
    assert_eq!(spearman(&[0.0, 0.3, 0.6, 0.9], &[1.0, 2.0, 3.0, 4.0]), 1.0);
    assert_eq!(spearman(&[0.0, 0.3, 0.6], &[0.5, 0.5, 0.5]), 0.0);
    // Ranks of y with a tie: [1, 2.5, 2.5, 4].
    let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 5.0, 5.0, 9.0]);
    assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
}

#[test]
fn sweep_has_one_row_per_strength_and_zero_is_unperturbed() {
    let (w, pools, pre) = setup();
    let pairs = pairs_of(&pools, 8);
    let bench = make_mc_benchmark(&pools.in_domain_test, 3).unwrap();
    let inputs = EvalInputs {
        vocab: w.vocab(),
        benchmark: &bench[..10],
        heldout: None,
        meta: ReportMeta {
            model_id: "sweep".into(),
            benchmark_id: "test".into(),
            seed: 0,
        },
    };
    let cfg = SweepConfig {
        dpo: crate::train::DpoConfig {
            steps: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let rows = domain_gap_sweep(&pre, &w, &pairs, &[0.0, 0.5, 1.0], &cfg, &inputs).unwrap();
    assert_eq!(rows.len(), 3);
    let base = crate::lm::attach_adapters(&pre, &cfg.adapter, cfg.adapter_seed).unwrap();
    let enc = crate::train::encode_pairs(w.vocab(), &pairs).unwrap();
    let (m, _) = crate::train::train_dpo(&base, &pre, w.vocab().bos(), &enc, &cfg.dpo).unwrap();
    assert_eq!(rows[0].mc1, evaluate(&m, &inputs).unwrap().mc1);
    assert_eq!(
        domain_gap_sweep(&pre, &w, &pairs, &[0.3, 0.6], &cfg, &inputs),
        Err(EvalError::BadStrengths)
    );
}

fn random_item(rng: &mut ChaCha8Rng) -> ItemScores {
    let n = rng.gen_range(1..6);
    ItemScores {
        correct: vec![rng.gen_range(-20.0..0.0)],
        incorrect: (0..n).map(|_| rng.gen_range(-20.0..0.0)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mc1_is_shift_invariant(seed in 0u64..10_000, c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<ItemScores> = (0..5).map(|_| random_item(&mut rng)).collect();
        let shifted: Vec<ItemScores> = items
            .iter()
            .map(|s| ItemScores {
                correct: s.correct.iter().map(|x| x + c).collect(),
                incorrect: s.incorrect.iter().map(|x| x + c).collect(),
            })
            .collect();
        prop_assert_eq!(mc1_from_scores(&items), mc1_from_scores(&shifted));
    }

    #[test]
    fn mc2_is_scale_invariant_and_bounded(seed in 0u64..10_000, k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<ItemScores> = (0..5).map(|_| random_item(&mut rng)).collect();
        let scaled: Vec<ItemScores> = items
            .iter()
            .map(|s| ItemScores {
                correct: s.correct.iter().map(|x| x + k.ln()).collect(),
                incorrect: s.incorrect.iter().map(|x| x + k.ln()).collect(),
            })
            .collect();
        let a = mc2_from_scores(&items).value.unwrap();
        let b = mc2_from_scores(&scaled).value.unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&mc1_from_scores(&items)));
    }

    #[test]
    fn spearman_is_bounded(xs in proptest::collection::vec(-5.0f64..5.0, 2..10), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = spearman(&xs, &ys);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }
}
