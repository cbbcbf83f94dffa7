use std::collections::HashSet;

use proptest::prelude::*;

use super::*;

fn world() -> FactWorld {
    build_world(11, 60, 6).unwrap()
}

#[test]
fn same_seed_builds_identical_worlds() {
    assert_eq!(build_world(5, 20, 4).unwrap(), build_world(5, 20, 4).unwrap());
    assert_ne!(build_world(5, 20, 4).unwrap().facts, build_world(6, 20, 4).unwrap().facts);
}

#[test]
fn too_few_attributes_is_rejected() {
    assert!(matches!(build_world(1, 10, 1), Err(WorldError::CountsTooSmall { .. })));
    assert!(matches!(build_world(1, 1, 4), Err(WorldError::CountsTooSmall { .. })));
}

#[test]
fn fifty_by_six_has_three_hundred_facts() {
    let w = build_world(3, 50, 6).unwrap();
    assert_eq!(w.num_facts(), 300);
    let distinct: HashSet<(usize, usize)> = (0..50).flat_map(|e| (0..6).map(move |a| (e, a))).collect();
    assert_eq!(distinct.len(), 300);
}

#[test]
fn every_attribute_has_at_least_three_values_and_distractors_exclude_truth() {
    let w = world();
    for a in 0..w.attributes.len() {
        assert!(w.domain_of(a).all_values().len() >= 3);
        for e in 0..w.entities.len() {
            let wrong = w.wrong_answers(e, a);
            assert!(!wrong.iter().any(|v| v == w.truth(e, a)));
            assert_ne!(w.truth(e, a), w.myth(a));
        }
    }
}

#[test]
fn tokenizer_round_trip_and_errors() {
    let w = world();
    let e = &w.entities[7];
    let text = format!("the color of {} is red", e);
    assert_eq!(w.decode(&w.encode(&text).unwrap()).unwrap(), text);
    assert!(matches!(w.encode("the color of zyzzyva"), Err(WorldError::UnknownWord(_))));
    assert!(w.encode("").unwrap().is_empty());
    assert!(w.encode("<unk>").is_err());
    let multi = "Q: what is the color of x ?\nA: red\n\nQ:".replace('x', e);
    assert_eq!(w.decode(&w.encode(&multi).unwrap()).unwrap(), multi);
}

#[test]
fn vocabulary_is_small_and_bijective() {
    let w = world();
    let v = w.vocab();
    assert!(v.len() >= 100 && v.len() <= 500, "{}", v.len());
    let set: HashSet<&String> = v.tokens().iter().collect();
    assert_eq!(set.len(), v.len());
    for (i, t) in v.tokens().iter().enumerate() {
        assert_eq!(v.id(t), Some(i as TokenId));
    }
}

#[test]
fn noise_free_corpus_is_all_true() {
    let w = world();
    let cfg = CorpusConfig {
        noise_rate: 0.0,
        ..CorpusConfig::default()
    };
    let c = make_pretrain_corpus(&w, &cfg).unwrap();
    let (total, wrong) = c.qa_counts();
    assert!(total > 0);
    assert_eq!(wrong, 0);
    for d in &c.docs {
        if let DocKind::Qa { .. } = d.kind {
            let (q, a) = d.text.split_once("\nA: ").unwrap();
            assert!(w.is_correct(q.strip_prefix("Q: ").unwrap(), a).unwrap());
        }
    }
}

#[test]
fn noise_rate_is_met_by_counting() {
    let w = world();
    let c = make_pretrain_corpus(&w, &CorpusConfig::default()).unwrap();
    // Independent recount from the document texts.
    let mut total = 0usize;
    let mut wrong = 0usize;
    for d in &c.docs {
        if let Some(rest) = d.text.strip_prefix("Q: ") {
            if let Some((q, a)) = rest.split_once("\nA: ") {
                total += 1;
                wrong += !w.is_correct(q, a).unwrap() as usize;
            }
        }
    }
    assert!(total >= 1000);
    let frac = wrong as f64 / total as f64;
    assert!((frac - 0.3).abs() <= 0.02, "{}", frac);
}

#[test]
fn corpus_tokenizes_and_is_deterministic() {
    let w = world();
    let c = make_pretrain_corpus(&w, &CorpusConfig::default()).unwrap();
    let (stream, starts) = c.token_stream(&w).unwrap();
    assert_eq!(starts.len(), c.docs.len());
    assert!(!stream.contains(&w.vocab().unk()));
    assert_eq!(c, make_pretrain_corpus(&w, &CorpusConfig::default()).unwrap());
}

#[test]
fn bad_noise_rate_is_rejected() {
    let w = world();
    let cfg = CorpusConfig {
        noise_rate: 0.5,
        ..CorpusConfig::default()
    };
    assert!(matches!(make_pretrain_corpus(&w, &cfg), Err(WorldError::BadNoiseRate(_))));
}

#[test]
fn pools_are_disjoint_and_sized() {
    let w = world();
    let p = make_question_pools(&w).unwrap();
    let mut seen = HashSet::new();
    let mut texts = HashSet::new();
    for s in p.splits() {
        for r in &s.records {
            assert_eq!(r.split, s.name);
            assert!(seen.insert(r.id.clone()), "duplicate id {}", r.id);
            assert!(texts.insert(r.question.clone()));
        }
    }
    let train = p.in_domain_train.records.len() as f64;
    let test = p.in_domain_test.records.len() as f64;
    assert!((train / test - 6.0).abs() < 0.5, "{} {}", train, test);
    assert!(p.ood.records.len() >= 256);
}

#[test]
fn ood_pool_shares_no_template_with_in_domain_pools() {
    let w = world();
    let p = make_question_pools(&w).unwrap();
    let template_of = |q: &str| {
        let r = w.lookup(q).unwrap();
        w.templates(w.attributes[r.attribute].family)[r.template]
    };
    let ind: HashSet<&str> = p
        .in_domain_train
        .records
        .iter()
        .chain(&p.in_domain_test.records)
        .map(|r| template_of(&r.question))
        .collect();
    let ood: HashSet<&str> = p.ood.records.iter().map(|r| template_of(&r.question)).collect();
    assert!(ind.is_disjoint(&ood));
    let ood_attrs: HashSet<usize> = p.ood.records.iter().map(|r| w.lookup(&r.question).unwrap().attribute).collect();
    let ind_attrs: HashSet<usize> = p
        .in_domain_test
        .records
        .iter()
        .map(|r| w.lookup(&r.question).unwrap().attribute)
        .collect();
    assert!(ood_attrs.is_disjoint(&ind_attrs));
}

#[test]
fn mc_benchmark_shapes() {
    let w = world();
    let p = make_question_pools(&w).unwrap();
    let mc = make_mc_benchmark(&p.in_domain_test, 2).unwrap();
    assert_eq!(mc.len(), p.in_domain_test.records.len());
    for item in &mc {
        assert_eq!(item.correct_answers.len() + item.incorrect_answers.len(), 3);
        let c: HashSet<&String> = item.correct_answers.iter().collect();
        assert!(item.incorrect_answers.iter().all(|x| !c.contains(x)));
        let r = w.lookup(&item.question).unwrap();
        assert_eq!(item.incorrect_answers[0], w.myth(r.attribute));
        for t in item.correct_answers.iter().chain(&item.incorrect_answers) {
            w.encode(t).unwrap();
        }
    }
    assert!(matches!(
        make_mc_benchmark(&p.in_domain_test, 40),
        Err(WorldError::InsufficientDistractors { .. })
    ));
}

#[test]
fn records_round_trip_through_jsonl() {
    let w = world();
    let p = make_question_pools(&w).unwrap();
    let text = crate::jsonl::to_string(&p.in_domain_test.records);
    assert!(text.contains("\"split\":\"in-domain-test\""));
    let back: Vec<QaRecord> = crate::jsonl::from_str(&text, "mem").unwrap();
    assert_eq!(back, p.in_domain_test.records);
}

#[test]
fn every_question_answer_is_classifiable() {
    let w = world();
    let p = make_question_pools(&w).unwrap();
    for s in p.splits() {
        for r in &s.records {
            assert!(w.is_correct(&r.question, &r.correct_answers[0]).unwrap());
            for x in &r.incorrect_answers {
                assert!(!w.is_correct(&r.question, x).unwrap());
            }
        }
    }
    assert!(w.is_correct("what is love ?", "red").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn splits_reproduce_from_seed(seed in 0u64..10_000, n in 8usize..40) {
        let a = make_question_pools(&build_world(seed, n, 4).unwrap()).unwrap();
        let b = make_question_pools(&build_world(seed, n, 4).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn decode_inverts_encode(seed in 0u64..1000, picks in proptest::collection::vec(0usize..10_000, 1..20)) {
        let w = build_world(seed, 10, 4).unwrap();
        let v = w.vocab();
        let words: Vec<&str> = picks.iter().map(|&i| v.tokens()[4 + i % (v.len() - 4)].as_str()).collect();
        let mut text = String::new();
        for (i, word) in words.iter().enumerate() {
            if i > 0 {
                text.push(if picks[i] % 5 == 0 { '\n' } else { ' ' });
            }
            text.push_str(word);
        }
        prop_assert_eq!(w.decode(&w.encode(&text).unwrap()).unwrap(), text);
    }
}
