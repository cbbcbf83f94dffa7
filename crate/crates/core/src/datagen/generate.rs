use serde::{Deserialize, Serialize};

use super::parse::{parse_response, RejectReason};
use super::prompt::{render_prompt, PromptTemplate};
use super::{DatagenError, TruthPair};
use crate::lm::{Decoder, DecoderState, ModelHandle, SamplingPolicy};
use crate::seeds;
use crate::world::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionItem {
    pub id: String,
    pub question: String,
}

/// A filtered generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rejection {
    pub id: String,
    pub raw_response: String,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationOutcome {
    pub pairs: Vec<TruthPair>,
    pub rejections: Vec<Rejection>,
}

/// Decoder primed with the demonstration block every prompt starts with.
struct PromptedDecoder<'a> {
    decoder: Decoder,
    vocab: &'a Vocabulary,
    template: &'a PromptTemplate,
    prefix: Vec<TokenId>,
    primed: DecoderState,
}

impl<'a> PromptedDecoder<'a> {
    fn new(model: &ModelHandle, vocab: &'a Vocabulary, template: &'a PromptTemplate) -> Result<Self, DatagenError> {
        let decoder = Decoder::new(model, vocab.bos());
        let prefix = vocab.encode(&template.prefix())?;
        let primed = decoder.start(&prefix)?;
        Ok(Self {
            decoder,
            vocab,
            template,
            prefix,
            primed,
        })
    }

    fn respond(&self, question: &str, policy: &SamplingPolicy, seed: u64) -> Result<String, DatagenError> {
        let full = self.vocab.encode(&render_prompt(self.template, question)?)?;
        let state = if full.starts_with(&self.prefix) {
            let mut st = self.primed.clone();
            self.decoder.feed(&mut st, &full[self.prefix.len()..])?;
            st
        } else {
            self.decoder.start(&full)?
        };
        let g = self.decoder.generate(state, policy, seed)?;
        Ok(self.vocab.decode(&g.tokens)?)
    }
}

/// Prompt the model once per question and keep the responses that parse.
///
/// Each question samples with a generator derived from `seed` and its id,
/// so the result does not depend on question order. Output is sorted by id.
pub fn generate_pairs(
    model: &ModelHandle,
    vocab: &Vocabulary,
    questions: &[QuestionItem],
    template: &PromptTemplate,
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<GenerationOutcome, DatagenError> {
    let mut out = GenerationOutcome::default();
    if questions.is_empty() {
        return Ok(out);
    }
    let pd = PromptedDecoder::new(model, vocab, template)?;
    for q in questions {
        let raw = pd.respond(&q.question, policy, seeds::derive_str(seed, "generate", &q.id))?;
        match parse_response(&raw) {
            Ok((correct, incorrect)) => out.pairs.push(TruthPair {
                id: q.id.clone(),
                question: q.question.clone(),
                correct_answer: correct,
                incorrect_answer: incorrect,
                iteration_created: 0,
                correct_answer_iteration: 0,
                parse_ok: true,
                ground_truth_audit: None,
            }),
            Err(reason) => out.rejections.push(Rejection {
                id: q.id.clone(),
                raw_response: raw,
                reason,
            }),
        }
    }
    out.pairs.sort_by(|a, b| a.id.cmp(&b.id));
    out.rejections.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Regenerate every pair and substitute the new correct answer, keeping the
/// incorrect answer. Pairs whose regeneration fails to parse, or whose new
/// correct answer equals the kept incorrect one, are returned unchanged.
pub fn refine_pairs(
    model: &ModelHandle,
    vocab: &Vocabulary,
    pairs: &[TruthPair],
    template: &PromptTemplate,
    policy: &SamplingPolicy,
    seed: u64,
    iteration: usize,
) -> Result<GenerationOutcome, DatagenError> {
    let mut out = GenerationOutcome::default();
    if pairs.is_empty() {
        return Ok(out);
    }
    let pd = PromptedDecoder::new(model, vocab, template)?;
    for p in pairs {
        let raw = pd.respond(&p.question, policy, seeds::derive_str(seed, "refine", &p.id))?;
        let parsed = parse_response(&raw).and_then(|(correct, _)| {
            if correct == p.incorrect_answer {
                Err(RejectReason::IdenticalPayloads)
            } else {
                Ok(correct)
            }
        });
        let mut next = p.clone();
        match parsed {
            Ok(correct) => {
                next.correct_answer = correct;
                next.correct_answer_iteration = iteration;
                next.ground_truth_audit = None;
            }
            Err(reason) => out.rejections.push(Rejection {
                id: p.id.clone(),
                raw_response: raw,
                reason,
            }),
        }
        out.pairs.push(next);
    }
    out.pairs.sort_by(|a, b| a.id.cmp(&b.id));
    out.rejections.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
