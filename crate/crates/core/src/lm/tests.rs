use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny_config(vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        context_length: 8,
        model_dim: 8,
        num_layers: 1,
        num_heads: 2,
        seed,
    }
}

/// Initialized model with every weight redrawn from a wide uniform so the
/// output distributions are far from uniform.
fn sharp_model(config: &ModelConfig, seed: u64) -> ModelHandle {
    let mut m = init_model(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.base.values_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
    }
    m
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - z).collect()
}

/// Log-probability of `seq[i]` given `seq[..i]`, one unpacked forward per prefix.
fn next_logprob(model: &ModelHandle, prefix: &[TokenId], next: TokenId) -> f64 {
    let z = forward_logits(model, prefix).unwrap();
    let v = model.config.vocab_size;
    let last = &z.data()[(prefix.len() - 1) * v..prefix.len() * v];
    log_softmax_row(last)[next as usize]
}

/// Probability of every continuation of length `len` after `prefix`, by
/// enumerating the whole tree.
fn enumerate_continuations(model: &ModelHandle, prefix: &[TokenId], len: usize) -> BTreeMap<Vec<TokenId>, f64> {
    let mut out = BTreeMap::new();
    if len == 0 {
        out.insert(Vec::new(), 1.0);
        return out;
    }
    for t in 0..model.config.vocab_size as TokenId {
        let p = next_logprob(model, prefix, t).exp();
        let mut longer = prefix.to_vec();
        longer.push(t);
        for (rest, q) in enumerate_continuations(model, &longer, len - 1) {
            let mut key = vec![t];
            key.extend(rest);
            out.insert(key, p * q);
        }
    }
    out
}

#[test]
fn same_seed_gives_identical_weights() {
    let c = tiny_config(5, 3);
    assert_eq!(init_model(&c).unwrap(), init_model(&c).unwrap());
}

#[test]
fn different_seeds_give_different_weights() {
    let a = init_model(&tiny_config(5, 3)).unwrap();
    let b = init_model(&tiny_config(5, 4)).unwrap();
    assert_ne!(a.base["tok_emb"], b.base["tok_emb"]);
}

#[test]
fn model_dim_must_divide_into_heads() {
    let mut c = ModelConfig::new(20, 0);
    c.model_dim = 65;
    assert!(matches!(init_model(&c), Err(LmError::InvalidConfig(_))));
}

#[test]
fn adapter_parameter_count_per_matrix() {
    let m = init_model(&ModelConfig::new(20, 0)).unwrap();
    let a = attach_adapters(&m, &AdapterSpec::default(), 0).unwrap();
    let set = a.adapters.as_ref().unwrap();
    let (down, up) = &set.pairs[&layer_key(0, "attn.wq")];
    assert_eq!(down.numel() + up.numel(), 8 * (64 + 64));
    assert_eq!(set.pairs.len(), 4);
    assert_eq!(set.num_parameters(), 4 * 1024);
}

#[test]
fn default_adapter_spec() {
    let s = AdapterSpec::default();
    assert_eq!((s.rank, s.alpha, s.dropout), (8, 16.0, 0.05));
}

#[test]
fn double_attachment_is_rejected() {
    let m = init_model(&tiny_config(5, 0)).unwrap();
    let a = attach_adapters(&m, &AdapterSpec::default(), 0).unwrap();
    assert_eq!(attach_adapters(&a, &AdapterSpec::default(), 0), Err(LmError::AdaptersAttached));
}

#[test]
fn fresh_adapters_leave_logits_unchanged() {
    let m = sharp_model(&tiny_config(5, 1), 1);
    let a = attach_adapters(&m, &AdapterSpec::default(), 9).unwrap();
    let toks = [0, 3, 1, 4, 2];
    assert_eq!(forward_logits(&m, &toks).unwrap(), forward_logits(&a, &toks).unwrap());
}

#[test]
fn logits_have_one_row_per_position() {
    let m = init_model(&tiny_config(5, 0)).unwrap();
    let z = forward_logits(&m, &[0, 1, 2]).unwrap();
    assert_eq!(z.shape(), &[3, 5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let m = sharp_model(&tiny_config(5, 0), 0);
    let z = forward_logits(&m, &[0, 1, 2, 3]).unwrap();
    for row in z.data().chunks(5) {
        let s: f64 = log_softmax_row(row).iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn overlong_and_unknown_inputs_are_errors() {
    let m = init_model(&tiny_config(5, 0)).unwrap();
    assert!(matches!(forward_logits(&m, &[0; 9]), Err(LmError::TooLong { len: 9, max: 8 })));
    assert!(matches!(forward_logits(&m, &[0, 7]), Err(LmError::OutOfVocabulary(7))));
    assert_eq!(sequence_logprob(&m, 0, &[1], &[]), Err(LmError::EmptyContinuation));
    assert_eq!(hidden_representation(&m, 0, &[]), Err(LmError::EmptyInput));
}

#[test]
fn uniform_model_logprob_is_length_times_log_quarter() {
    let mut m = init_model(&tiny_config(4, 0)).unwrap();
    for t in m.base.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let lp = sequence_logprob(&m, 0, &[1], &[2, 3, 1]).unwrap();
    assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-5, "{}", lp);
}

#[test]
fn logprob_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let vocab = rng.gen_range(2..=5);
        let m = sharp_model(&tiny_config(vocab, trial), trial);
        let len = rng.gen_range(1..=3);
        let prompt: Vec<TokenId> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
        let mut prefix = vec![0];
        prefix.extend(&prompt);
        let table = enumerate_continuations(&m, &prefix, len);
        let total: f64 = table.values().sum();
        assert!((total - 1.0).abs() < 1e-5);
        for (cont, p) in table.iter().take(8) {
            let lp = sequence_logprob(&m, 0, &prompt, cont).unwrap();
            assert!((lp - p.ln()).abs() < 1e-5, "trial {} {:?}: {} vs {}", trial, cont, lp, p.ln());
        }
    }
}

#[test]
fn hidden_representation_has_model_dim() {
    let m = sharp_model(&tiny_config(5, 0), 0);
    let h = hidden_representation(&m, 0, &[1, 2]).unwrap();
    assert_eq!(h.len(), 8);
    assert_eq!(h, hidden_representation(&m, 0, &[1, 2]).unwrap());
    assert_ne!(h, hidden_representation(&m, 0, &[1, 3]).unwrap());
}

#[test]
fn batched_scoring_matches_single_items() {
    let m = sharp_model(&tiny_config(5, 2), 2);
    let prompts: [&[TokenId]; 3] = [&[1], &[2, 3], &[]];
    let conts: [&[TokenId]; 3] = [&[4, 1], &[0], &[1, 2, 3]];
    let items: Vec<ScoreItem> = prompts
        .iter()
        .zip(conts.iter())
        .map(|(p, c)| ScoreItem {
            prompt: p,
            continuation: c,
        })
        .collect();
    let batch = score_items(&m, 0, &items).unwrap();
    for (i, it) in items.iter().enumerate() {
        let single = sequence_logprob(&m, 0, it.prompt, it.continuation).unwrap();
        assert!((batch[i] - single).abs() < 1e-5);
    }
}

#[test]
fn decoder_logits_match_full_forward() {
    let m = sharp_model(&tiny_config(5, 4), 4);
    let dec = Decoder::new(&m, 0);
    let mut st = dec.start(&[1, 2]).unwrap();
    dec.feed(&mut st, &[3, 4]).unwrap();
    let full = forward_logits(&m, &[0, 1, 2, 3, 4]).unwrap();
    let last = &full.data()[4 * 5..];
    for (a, b) in st.logits().iter().zip(last) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn greedy_generation_follows_argmax() {
    let m = sharp_model(&tiny_config(5, 5), 5);
    let policy = SamplingPolicy {
        temperature: 0.0,
        top_p: 1.0,
        max_new_tokens: 4,
        stop: vec![],
    };
    let g = sample_generate(&m, 0, &[1], &policy, 0).unwrap();
    let mut seq = vec![0, 1];
    for &t in &g.tokens {
        let z = forward_logits(&m, &seq).unwrap();
        let row = &z.data()[(seq.len() - 1) * 5..seq.len() * 5];
        let best = (0..5).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(t as usize, best);
        seq.push(t);
    }
}

#[test]
fn small_temperature_equals_greedy() {
    let m = sharp_model(&tiny_config(5, 6), 6);
    let greedy = SamplingPolicy {
        temperature: 0.0,
        top_p: 1.0,
        max_new_tokens: 5,
        stop: vec![],
    };
    let cold = SamplingPolicy {
        temperature: 1e-4,
        ..greedy.clone()
    };
    let a = sample_generate(&m, 0, &[2], &greedy, 1).unwrap();
    let b = sample_generate(&m, 0, &[2], &cold, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn generation_is_seeded_and_stops_on_markers() {
    let m = sharp_model(&tiny_config(5, 7), 7);
    let policy = SamplingPolicy {
        temperature: 1.0,
        top_p: 1.0,
        max_new_tokens: 6,
        stop: vec![vec![3]],
    };
    let a = sample_generate(&m, 0, &[1], &policy, 42).unwrap();
    assert_eq!(a, sample_generate(&m, 0, &[1], &policy, 42).unwrap());
    assert!(!a.tokens.contains(&3));
    if a.stop == StopReason::Budget {
        assert_eq!(a.tokens.len(), 6);
    }
}

#[test]
fn generation_truncates_at_context_limit() {
    let m = sharp_model(&tiny_config(5, 8), 8);
    let policy = SamplingPolicy {
        temperature: 1.0,
        top_p: 1.0,
        max_new_tokens: 20,
        stop: vec![],
    };
    let g = sample_generate(&m, 0, &[1, 2, 3], &policy, 0).unwrap();
    assert_eq!(g.stop, StopReason::ContextFull);
    assert_eq!(g.tokens.len(), 8 - 4 + 1);
}

#[test]
fn sampling_frequencies_match_softmax() {
    let logits = [0.3f32, -0.4];
    let policy = SamplingPolicy {
        temperature: 1.0,
        top_p: 1.0,
        max_new_tokens: 1,
        stop: vec![],
    };
    let p0 = log_softmax_row(&logits)[0].exp();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hits = (0..n).filter(|_| sample_next(&logits, &policy, &mut rng) == 0).count();
    let se = (p0 * (1.0 - p0) / n as f64).sqrt();
    assert!((hits as f64 / n as f64 - p0).abs() < 3.0 * se);
}

#[test]
fn nucleus_drops_the_tail() {
    let logits = [3.0f32, 0.0, -3.0];
    let policy = SamplingPolicy {
        temperature: 1.0,
        top_p: 0.5,
        max_new_tokens: 1,
        stop: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!((0..500).all(|_| sample_next(&logits, &policy, &mut rng) == 0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.grth");
    let m = sharp_model(&tiny_config(5, 9), 9);
    let a = attach_adapters(&m, &AdapterSpec::default(), 1).unwrap();
    let mut prov = BTreeMap::new();
    prov.insert("note".to_string(), "x".to_string());
    save_checkpoint(&a, &path, prov.clone()).unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(meta.provenance, prov);
    assert_eq!(&std::fs::read(&path).unwrap()[..4], MAGIC);
}

#[test]
fn checkpoint_rejects_bad_magic_and_version() {
    let m = init_model(&tiny_config(5, 0)).unwrap();
    let mut bytes = encode_checkpoint(&m);
    assert!(decode_tensors(&bytes, FORMAT_VERSION + 1).is_err());
    bytes[0] = b'X';
    assert!(matches!(decode_tensors(&bytes, FORMAT_VERSION), Err(CheckpointError::BadMagic)));
}

#[test]
fn parameter_distance_of_self_is_zero() {
    let m = sharp_model(&tiny_config(5, 0), 0);
    assert_eq!(m.parameter_distance(&m).unwrap(), 0.0);
    let mut n = m.clone();
    n.base.get_mut("tok_emb").unwrap().data_mut()[0] += 3.0;
    n.base.get_mut("pos_emb").unwrap().data_mut()[0] += 4.0;
    assert!((m.parameter_distance(&n).unwrap() - 5.0).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_are_causal(seed in 0u64..1000, toks in proptest::collection::vec(0u32..5, 2..8), at in 0usize..7, new in 0u32..5) {
        let m = sharp_model(&tiny_config(5, seed), seed);
        let at = at % (toks.len() - 1) + 1;
        let mut edited = toks.clone();
        edited[at] = new;
        let a = forward_logits(&m, &toks).unwrap();
        let b = forward_logits(&m, &edited).unwrap();
        prop_assert_eq!(&a.data()[..at * 5], &b.data()[..at * 5]);
    }

    #[test]
    fn logprob_is_additive(seed in 0u64..1000, p in proptest::collection::vec(0u32..5, 0..3),
                           a in proptest::collection::vec(0u32..5, 1..3), b in proptest::collection::vec(0u32..5, 1..3)) {
        let m = sharp_model(&tiny_config(5, seed), seed);
        let ab: Vec<TokenId> = a.iter().chain(&b).copied().collect();
        let pa: Vec<TokenId> = p.iter().chain(&a).copied().collect();
        let whole = sequence_logprob(&m, 0, &p, &ab).unwrap();
        let parts = sequence_logprob(&m, 0, &p, &a).unwrap() + sequence_logprob(&m, 0, &pa, &b).unwrap();
        prop_assert!((whole - parts).abs() < 1e-4);
    }

    #[test]
    fn fresh_adapters_are_identity(seed in 0u64..1000, toks in proptest::collection::vec(0u32..5, 1..8)) {
        let m = sharp_model(&tiny_config(5, seed), seed);
        let a = attach_adapters(&m, &AdapterSpec::default(), seed).unwrap();
        prop_assert_eq!(forward_logits(&m, &toks).unwrap(), forward_logits(&a, &toks).unwrap());
    }
}
