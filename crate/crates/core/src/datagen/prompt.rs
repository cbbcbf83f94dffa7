use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::parse::{parse_response, CORRECT_PREFIX, INCORRECT_PREFIX};
use super::DatagenError;
use crate::seeds;
use crate::world::{instruction_line, pair_lines, QaDatasetSplit, INSTRUCTION};

/// Demonstrations used by default.
pub const DEFAULT_DEMOS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub question: String,
    pub correct: String,
    pub incorrect: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoDomain {
    InDomain,
    Ood,
}

/// Instruction plus few-shot demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub instruction: String,
    pub demonstrations: Vec<Demonstration>,
    pub domain: DemoDomain,
}

impl PromptTemplate {
    pub fn new(demonstrations: Vec<Demonstration>, domain: DemoDomain) -> Result<Self, DatagenError> {
        let t = Self {
            instruction: INSTRUCTION.to_string(),
            demonstrations,
            domain,
        };
        t.validate()?;
        Ok(t)
    }

    /// `m` seeded demonstrations from a pool. Each uses the record's truth
    /// and its first incorrect answer, the common misconception.
    pub fn from_pool(pool: &QaDatasetSplit, m: usize, domain: DemoDomain, seed: u64) -> Result<Self, DatagenError> {
        if m == 0 {
            return Err(DatagenError::NoDemonstrations);
        }
        if pool.records.len() < m {
            return Err(DatagenError::PoolTooSmall {
                needed: m,
                available: pool.records.len(),
            });
        }
        let mut idx: Vec<usize> = (0..pool.records.len()).collect();
        idx.shuffle(&mut seeds::rng(seed, "demonstrations", 0));
        let demos = idx[..m]
            .iter()
            .map(|&i| {
                let r = &pool.records[i];
                Demonstration {
                    question: r.question.clone(),
                    correct: r.correct_answers[0].clone(),
                    incorrect: r.incorrect_answers[0].clone(),
                }
            })
            .collect();
        Self::new(demos, domain)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.demonstrations.is_empty() {
            return Err(DatagenError::NoDemonstrations);
        }
        for (index, d) in self.demonstrations.iter().enumerate() {
            parse_response(&pair_lines(&d.correct, &d.incorrect))
                .map_err(|reason| DatagenError::BadDemonstration { index, reason })?;
        }
        Ok(())
    }

    /// The demonstration block shared by every prompt, ending in a blank line.
    pub fn prefix(&self) -> String {
        let mut out = String::new();
        for d in &self.demonstrations {
            out.push_str(&format!("Q: {}\n{}\n\n", d.question, pair_lines(&d.correct, &d.incorrect)));
        }
        out
    }

    fn instruction_block(&self, question: &str) -> String {
        if self.instruction == INSTRUCTION {
            instruction_line(question)
        } else {
            format!("Consider the following question: {}\n{}", question, self.instruction)
        }
    }
}

fn candidate_lines(correct: &str, incorrect: &str) -> String {
    format!("Given {} {}\nGiven {} {}", lower(CORRECT_PREFIX), correct, lower(INCORRECT_PREFIX), incorrect)
}

fn lower(prefix: &str) -> String {
    let mut c = prefix.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Demonstrations, then the instruction for `question`; generation continues
/// after the final newline.
pub fn render_prompt(template: &PromptTemplate, question: &str) -> Result<String, DatagenError> {
    if question.trim().is_empty() {
        return Err(DatagenError::EmptyQuestion);
    }
    Ok(format!("{}{}\n", template.prefix(), template.instruction_block(question)))
}

/// As [`render_prompt`], with given candidate answers shown under every
/// demonstration question and under the final instruction.
pub fn render_prompt_with_candidates(
    template: &PromptTemplate,
    question: &str,
    candidate_correct: &str,
    candidate_incorrect: &str,
) -> Result<String, DatagenError> {
    if question.trim().is_empty() {
        return Err(DatagenError::EmptyQuestion);
    }
    if candidate_correct.trim().is_empty() || candidate_incorrect.trim().is_empty() {
        return Err(DatagenError::EmptyCandidate);
    }
    let mut out = String::new();
    for d in &template.demonstrations {
        out.push_str(&format!(
            "Q: {}\n{}\n{}\n\n",
            d.question,
            candidate_lines(&d.correct, &d.incorrect),
            pair_lines(&d.correct, &d.incorrect)
        ));
    }
    out.push_str(&format!(
        "{}\n{}\n",
        template.instruction_block(question),
        candidate_lines(candidate_correct, candidate_incorrect)
    ));
    Ok(out)
}

/// The bare prompt answers are scored against: `"Q: {question}\nA:"`.
pub fn scoring_prompt(question: &str) -> String {
    format!("Q: {}\nA:", question)
}
