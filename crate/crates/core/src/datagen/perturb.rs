use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatagenError, TruthPair};
use crate::seeds;
use crate::world::FactWorld;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationScope {
    AnswersOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Per-token replacement probability in `[0, 1]`.
    pub strength: f64,
    pub seed: u64,
    pub scope: PerturbationScope,
}

impl PerturbationConfig {
    pub fn new(strength: f64, seed: u64) -> Self {
        Self {
            strength,
            seed,
            scope: PerturbationScope::AnswersOnly,
        }
    }
}

/// Replace each answer word, with probability `strength`, by a different
/// value of the question's attribute domain. Questions are untouched.
/// Replacements avoid the other answer's word at the same position, so the
/// two answers never become equal.
pub fn perturb_answers(
    pairs: &[TruthPair],
    config: &PerturbationConfig,
    world: &FactWorld,
) -> Result<Vec<TruthPair>, DatagenError> {
    if !(0.0..=1.0).contains(&config.strength) {
        return Err(DatagenError::BadStrength(config.strength));
    }
    if config.strength == 0.0 {
        return Ok(pairs.to_vec());
    }
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let q = world
            .lookup(&p.question)
            .ok_or_else(|| DatagenError::UnknownQuestion(p.question.clone()))?;
        let values = world.domain_of(q.attribute).all_values();
        let mut rng = seeds::rng_for(config.seed, "perturb", &p.id);
        let edit = |text: &str, avoid: Option<&[String]>, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
            let words: Vec<&str> = text.split(' ').collect();
            let same_len = avoid.filter(|a| a.len() == words.len());
            words
                .iter()
                .enumerate()
                .map(|(j, &w)| {
                    if rng.gen::<f64>() >= config.strength {
                        return w.to_string();
                    }
                    let choices: Vec<&str> = values
                        .iter()
                        .copied()
                        .filter(|&v| v != w && same_len.is_none_or(|a| a[j] != v))
                        .collect();
                    choices.choose(rng).map_or(w, |v| v).to_string()
                })
                .collect()
        };
        let original: Vec<String> = p.incorrect_answer.split(' ').map(String::from).collect();
        let correct = edit(&p.correct_answer, Some(&original), &mut rng);
        let incorrect = edit(&p.incorrect_answer, Some(&correct), &mut rng);
        let mut next = p.clone();
        next.correct_answer = correct.join(" ");
        next.incorrect_answer = incorrect.join(" ");
        next.ground_truth_audit = None;
        out.push(next);
    }
    Ok(out)
}
