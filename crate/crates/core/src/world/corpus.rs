use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::facts::{FactWorld, QuestionRef, CORPUS_TEMPLATES};
use super::vocab::TokenId;
use super::WorldError;
use crate::seeds;

/// The instruction sentence that asks for a pair of answers.
pub const INSTRUCTION: &str = "Please generate a correct answer and an incorrect answer. \
Make sure the answers are plausible. There is no need to give an explanation.";

pub fn instruction_line(question: &str) -> String {
    format!("Consider the following question: {}\n{}", question, INSTRUCTION)
}

pub fn qa_text(question: &str, answer: &str) -> String {
    format!("Q: {}\nA: {}", question, answer)
}

pub fn pair_lines(correct: &str, incorrect: &str) -> String {
    format!("Correct answer: {}\nIncorrect answer: {}", correct, incorrect)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Fraction of QA documents that carry a wrong answer, in `[0, 0.5)`.
    pub noise_rate: f64,
    pub qa_per_fact: usize,
    /// Wrong QA documents per afflicted fact; a fact is afflicted when it
    /// carries any.
    pub wrong_per_afflicted_fact: usize,
    pub pair_docs_per_fact: usize,
    pub instruction_docs_per_fact: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            noise_rate: 0.3,
            qa_per_fact: 5,
            wrong_per_afflicted_fact: 3,
            pair_docs_per_fact: 2,
            instruction_docs_per_fact: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Statement,
    Qa { wrong: bool },
    Pair,
    Instruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub kind: DocKind,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainCorpus {
    pub docs: Vec<CorpusDoc>,
    /// Facts whose QA documents repeat the misconception, as `(entity, attribute)`.
    pub afflicted: Vec<(usize, usize)>,
}

impl PretrainCorpus {
    pub fn qa_counts(&self) -> (usize, usize) {
        let mut total = 0;
        let mut wrong = 0;
        for d in &self.docs {
            if let DocKind::Qa { wrong: w } = d.kind {
                total += 1;
                wrong += w as usize;
            }
        }
        (total, wrong)
    }

    /// Token stream of all documents separated by a blank line, and the
    /// offset where each document starts.
    pub fn token_stream(&self, world: &FactWorld) -> Result<(Vec<TokenId>, Vec<usize>), WorldError> {
        let nl = world.vocab().newline();
        let mut stream = Vec::new();
        let mut starts = Vec::with_capacity(self.docs.len());
        for (i, d) in self.docs.iter().enumerate() {
            if i > 0 {
                stream.push(nl);
                stream.push(nl);
            }
            starts.push(stream.len());
            stream.extend(world.encode(&d.text)?);
        }
        Ok((stream, starts))
    }
}

/// Pretraining documents for every fact.
///
/// Per fact: one true statement, `qa_per_fact` QA documents, pair documents
/// showing a correct and an incorrect answer, and instruction documents in
/// the generation format. Noise enters only through QA documents of
/// afflicted facts, which answer with the domain's misconception; pair and
/// instruction documents always mark the true value as correct.
pub fn make_pretrain_corpus(world: &FactWorld, config: &CorpusConfig) -> Result<PretrainCorpus, WorldError> {
    build_docs(world, config, "corpus")
}

/// Documents drawn from the same distribution with an independent
/// composition stream, truncated to `limit` documents.
pub fn make_heldout_corpus(
    world: &FactWorld,
    config: &CorpusConfig,
    limit: usize,
) -> Result<PretrainCorpus, WorldError> {
    let mut c = build_docs(world, config, "heldout")?;
    c.docs.truncate(limit);
    Ok(c)
}

fn build_docs(world: &FactWorld, config: &CorpusConfig, stream: &str) -> Result<PretrainCorpus, WorldError> {
    if !(0.0..0.5).contains(&config.noise_rate) {
        return Err(WorldError::BadNoiseRate(config.noise_rate));
    }
    if config.qa_per_fact == 0 || config.wrong_per_afflicted_fact == 0 || config.wrong_per_afflicted_fact > config.qa_per_fact
    {
        return Err(WorldError::BadCorpusConfig(
            "need 1 <= wrong_per_afflicted_fact <= qa_per_fact".into(),
        ));
    }
    let facts: Vec<(usize, usize)> = (0..world.entities.len())
        .flat_map(|e| (0..world.attributes.len()).map(move |a| (e, a)))
        .collect();
    let total_qa = facts.len() * config.qa_per_fact;
    let mut wrong_left = (config.noise_rate * total_qa as f64).round() as usize;

    let mut order = facts.clone();
    order.shuffle(&mut seeds::rng(world.seed, &format!("{}-afflicted", stream), 0));
    let mut wrong_of = vec![0usize; facts.len()];
    let mut afflicted = Vec::new();
    for &(e, a) in &order {
        if wrong_left == 0 {
            break;
        }
        let k = wrong_left.min(config.wrong_per_afflicted_fact);
        wrong_of[e * world.attributes.len() + a] = k;
        wrong_left -= k;
        afflicted.push((e, a));
    }
    afflicted.sort_unstable();

    let mut rng = seeds::rng(world.seed, &format!("{}-docs", stream), 0);
    let mut docs = Vec::new();
    for (fi, &(e, a)) in facts.iter().enumerate() {
        let truth = world.truth(e, a).to_string();
        let myth = world.myth(a).to_string();
        let is_afflicted = wrong_of[fi] > 0;
        let q = |rng: &mut rand_chacha::ChaCha8Rng| {
            world.question(QuestionRef {
                entity: e,
                attribute: a,
                template: rng.gen_range(0..CORPUS_TEMPLATES),
            })
        };
        docs.push(CorpusDoc {
            kind: DocKind::Statement,
            text: world.statement(e, a),
        });
        for k in 0..config.qa_per_fact {
            let wrong = k < wrong_of[fi];
            let answer = if wrong { &myth } else { &truth };
            docs.push(CorpusDoc {
                kind: DocKind::Qa { wrong },
                text: qa_text(&q(&mut rng), answer),
            });
        }
        let distractor = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
            if is_afflicted || rng.gen_bool(0.5) {
                myth.clone()
            } else {
                let others = world.wrong_answers(e, a);
                others[rng.gen_range(1..others.len())].clone()
            }
        };
        for _ in 0..config.pair_docs_per_fact {
            let f = distractor(&mut rng);
            docs.push(CorpusDoc {
                kind: DocKind::Pair,
                text: format!("Q: {}\n{}", q(&mut rng), pair_lines(&truth, &f)),
            });
        }
        for _ in 0..config.instruction_docs_per_fact {
            let f = distractor(&mut rng);
            docs.push(CorpusDoc {
                kind: DocKind::Instruction,
                text: format!("{}\n{}", instruction_line(&q(&mut rng)), pair_lines(&truth, &f)),
            });
        }
    }
    docs.shuffle(&mut rng);
    Ok(PretrainCorpus { docs, afflicted })
}
