use super::EvalError;
use crate::datagen::scoring_prompt;
use crate::lm::{score_items, total_nll, ModelHandle, ScoreItem};
use crate::world::{McQuestion, TokenId, Vocabulary};

/// Option log-probabilities of one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemScores {
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mc2Score {
    pub value: Option<f64>,
    /// Set when some item has no finite probability mass at all.
    pub nan_flag: bool,
}

/// Summed log-probability of every option given the item's scoring prompt.
pub fn option_scores(model: &ModelHandle, vocab: &Vocabulary, bench: &[McQuestion]) -> Result<Vec<ItemScores>, EvalError> {
    if bench.is_empty() {
        return Err(EvalError::EmptyBenchmark);
    }
    let mut prompts = Vec::with_capacity(bench.len());
    let mut options = Vec::with_capacity(bench.len());
    for it in bench {
        if it.correct_answers.is_empty() || it.incorrect_answers.is_empty() {
            return Err(EvalError::MissingOptions { id: it.id.clone() });
        }
        prompts.push(vocab.encode(&scoring_prompt(&it.question))?);
        let opts: Vec<Vec<TokenId>> = it
            .correct_answers
            .iter()
            .chain(&it.incorrect_answers)
            .map(|a| vocab.encode(a))
            .collect::<Result<_, _>>()?;
        options.push(opts);
    }
    let mut items = Vec::new();
    for (p, opts) in prompts.iter().zip(&options) {
        for o in opts {
            items.push(ScoreItem {
                prompt: p,
                continuation: o,
            });
        }
    }
    let lp = score_items(model, vocab.bos(), &items)?;
    let mut at = 0;
    Ok(bench
        .iter()
        .map(|it| {
            let nc = it.correct_answers.len();
            let ni = it.incorrect_answers.len();
            let s = ItemScores {
                correct: lp[at..at + nc].to_vec(),
                incorrect: lp[at + nc..at + nc + ni].to_vec(),
            };
            at += nc + ni;
            s
        })
        .collect())
}

/// Fraction of items whose single correct option strictly beats every
/// incorrect one; ties lose.
pub fn mc1_from_scores(scores: &[ItemScores]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let wins = scores
        .iter()
        .filter(|s| s.incorrect.iter().all(|&x| s.correct[0] > x))
        .count();
    wins as f64 / scores.len() as f64
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean normalized probability of the correct set.
pub fn mc2_from_scores(scores: &[ItemScores]) -> Mc2Score {
    let mut total = 0.0;
    for s in scores {
        let all: Vec<f64> = s.correct.iter().chain(&s.incorrect).copied().collect();
        let denom = log_sum_exp(&all);
        if !denom.is_finite() || all.iter().any(|x| x.is_nan()) {
            return Mc2Score {
                value: None,
                nan_flag: true,
            };
        }
        total += (log_sum_exp(&s.correct) - denom).exp();
    }
    Mc2Score {
        value: (!scores.is_empty()).then(|| total / scores.len() as f64),
        nan_flag: false,
    }
}

pub fn score_mc1(model: &ModelHandle, vocab: &Vocabulary, bench: &[McQuestion]) -> Result<f64, EvalError> {
    if let Some(it) = bench.iter().find(|it| it.correct_answers.len() != 1) {
        return Err(EvalError::NotSingleCorrect {
            id: it.id.clone(),
            count: it.correct_answers.len(),
        });
    }
    Ok(mc1_from_scores(&option_scores(model, vocab, bench)?))
}

pub fn score_mc2(model: &ModelHandle, vocab: &Vocabulary, bench: &[McQuestion]) -> Result<Mc2Score, EvalError> {
    Ok(mc2_from_scores(&option_scores(model, vocab, bench)?))
}

/// `exp` of the mean per-token negative log-likelihood over the documents,
/// each scored after BOS.
pub fn heldout_perplexity(model: &ModelHandle, bos: TokenId, docs: &[Vec<TokenId>]) -> Result<f64, EvalError> {
    let docs: Vec<Vec<TokenId>> = docs.iter().filter(|d| !d.is_empty()).cloned().collect();
    if docs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let (nll, count) = total_nll(model, bos, &docs)?;
    Ok((nll / count as f64).exp())
}
