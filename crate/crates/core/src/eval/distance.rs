use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::datagen::TruthPair;
use crate::lm::{hidden_representations, ModelHandle};
use crate::world::{TokenId, Vocabulary};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
    pub median: f64,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub probe_id: String,
    pub distances: Vec<f64>,
    pub stats: DistanceStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub before: DistanceReport,
    pub after: DistanceReport,
    /// `after.mean - before.mean`.
    pub shift: f64,
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Distance between the probe's representations of the two answers.
pub fn pairwise_distance(probe: &ModelHandle, vocab: &Vocabulary, pair: &TruthPair) -> Result<f64, EvalError> {
    Ok(pairwise_distances(probe, vocab, std::slice::from_ref(pair))?[0])
}

pub fn pairwise_distances(probe: &ModelHandle, vocab: &Vocabulary, pairs: &[TruthPair]) -> Result<Vec<f64>, EvalError> {
    let mut texts: Vec<Vec<TokenId>> = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        for a in [&p.correct_answer, &p.incorrect_answer] {
            let t = vocab.encode(a)?;
            if t.is_empty() {
                return Err(EvalError::EmptyAnswer);
            }
            texts.push(t);
        }
    }
    let refs: Vec<&[TokenId]> = texts.iter().map(|t| t.as_slice()).collect();
    let reps = hidden_representations(probe, vocab.bos(), &refs)?;
    Ok(reps.chunks(2).map(|c| euclid(&c[0], &c[1])).collect())
}

/// Count, mean, population standard deviation, median and an equal-width
/// histogram over `[min, max]`.
pub fn summarize(values: &[f64], bins: usize) -> DistanceStats {
    let n = values.len();
    if n == 0 {
        return DistanceStats {
            count: 0,
            mean: f64::NAN,
            stddev: f64::NAN,
            median: f64::NAN,
            histogram: Vec::new(),
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stddev = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            bin_low: lo + i as f64 * width,
            bin_high: lo + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        histogram[i].count += 1;
    }
    DistanceStats {
        count: n,
        mean,
        stddev,
        median,
        histogram,
    }
}

fn report(probe: &ModelHandle, probe_id: &str, vocab: &Vocabulary, pairs: &[TruthPair]) -> Result<DistanceReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let distances = pairwise_distances(probe, vocab, pairs)?;
    let stats = summarize(&distances, HISTOGRAM_BINS);
    Ok(DistanceReport {
        probe_id: probe_id.to_string(),
        distances,
        stats,
    })
}

/// Distance distributions of two pair sets under the same probe and the
/// difference of their means.
pub fn distance_shift_report(
    probe: &ModelHandle,
    probe_id: &str,
    vocab: &Vocabulary,
    before: &[TruthPair],
    after: &[TruthPair],
) -> Result<ShiftReport, EvalError> {
    let before = report(probe, probe_id, vocab, before)?;
    let after = report(probe, probe_id, vocab, after)?;
    let shift = after.stats.mean - before.stats.mean;
    Ok(ShiftReport { before, after, shift })
}
