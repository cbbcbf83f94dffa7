use criterion::{black_box, criterion_group, criterion_main, Criterion};
use grath_core::datagen::{scoring_prompt, TruthPair};
use grath_core::lm::{
    attach_adapters, forward_logits, init_model, score_items, Decoder, ModelConfig, ModelHandle, SamplingPolicy,
    ScoreItem,
};
use grath_core::pipeline::{Setting, WorldConfig};
use grath_core::train::{encode_pairs, train_dpo, DpoConfig};
use grath_core::world::TokenId;

fn setup() -> (Setting, ModelHandle) {
    let setting = Setting::build(&WorldConfig::default()).unwrap();
    let model = init_model(&ModelConfig::new(setting.world.vocab().len(), 0)).unwrap();
    (setting, model)
}

fn forward(c: &mut Criterion) {
    let (setting, model) = setup();
    let tokens: Vec<TokenId> = setting.heldout[0].iter().copied().take(64).collect();
    c.bench_function("forward_logits/64", |b| b.iter(|| forward_logits(&model, black_box(&tokens)).unwrap()));
}

fn scoring(c: &mut Criterion) {
    let (setting, model) = setup();
    let vocab = setting.world.vocab();
    let mut owned = Vec::new();
    for q in setting.benchmark.iter().take(8) {
        let prompt = vocab.encode(&scoring_prompt(&q.question)).unwrap();
        for a in q.correct_answers.iter().chain(&q.incorrect_answers) {
            owned.push((prompt.clone(), vocab.encode(a).unwrap()));
        }
    }
    let items: Vec<ScoreItem> = owned
        .iter()
        .map(|(p, a)| ScoreItem {
            prompt: p,
            continuation: a,
        })
        .collect();
    c.bench_function("score_items/8-questions", |b| {
        b.iter(|| score_items(&model, vocab.bos(), black_box(&items)).unwrap())
    });
}

fn dpo_step(c: &mut Criterion) {
    let (setting, model) = setup();
    let vocab = setting.world.vocab();
    let pairs: Vec<TruthPair> = setting.pools.ood.records[..8]
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
    let encoded = encode_pairs(vocab, &pairs).unwrap();
    let policy = attach_adapters(&model, &Default::default(), 0).unwrap();
    let config = DpoConfig {
        steps: 1,
        batch_size: 8,
        ..Default::default()
    };
    c.bench_function("train_dpo/1-step-batch-8", |b| {
        b.iter(|| train_dpo(&policy, &model, vocab.bos(), black_box(&encoded), &config).unwrap())
    });
}

fn decoding(c: &mut Criterion) {
    let (setting, model) = setup();
    let vocab = setting.world.vocab();
    let prompt = vocab.encode(&scoring_prompt(&setting.benchmark[0].question)).unwrap();
    let decoder = Decoder::new(&model, vocab.bos());
    let mut policy = SamplingPolicy::new(Vec::new());
    policy.max_new_tokens = 32;
    c.bench_function("decode/32-tokens", |b| {
        b.iter(|| {
            let st = decoder.start(black_box(&prompt)).unwrap();
            decoder.generate(st, &policy, 7).unwrap()
        })
    });
}

criterion_group!(benches, forward, scoring, dpo_step, decoding);
criterion_main!(benches);
