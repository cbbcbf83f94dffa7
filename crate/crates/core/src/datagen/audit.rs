use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatagenError, GroundTruth, TruthPair};
use crate::world::FactWorld;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAudit {
    pub id: String,
    pub correct_answer_iteration: usize,
    pub labels: GroundTruth,
}

/// Aggregate audit rates; `None` when there are no pairs to rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRates {
    pub iteration: Option<usize>,
    pub pairs: usize,
    /// Fraction of "correct" answers that are true.
    pub correct_rate: Option<f64>,
    /// Fraction of "incorrect" answers that are false.
    pub incorrect_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pairs: Vec<PairAudit>,
    /// Grouped by the iteration that produced each correct answer.
    pub per_iteration: Vec<IterationRates>,
    pub overall: IterationRates,
}

fn rates(iteration: Option<usize>, audits: &[&PairAudit]) -> IterationRates {
    let n = audits.len();
    let frac = |f: &dyn Fn(&PairAudit) -> bool| (n > 0).then(|| audits.iter().filter(|a| f(a)).count() as f64 / n as f64);
    IterationRates {
        iteration,
        pairs: n,
        correct_rate: frac(&|a| a.labels.correct_is_true),
        incorrect_rate: frac(&|a| a.labels.incorrect_is_false),
    }
}

/// Label every pair by exact lookup in the world.
pub fn audit_pairs(pairs: &[TruthPair], world: &FactWorld) -> Result<AuditReport, DatagenError> {
    let mut audits = Vec::with_capacity(pairs.len());
    for p in pairs {
        let known = |a: &str| world.is_correct(&p.question, a).map_err(|_| DatagenError::UnknownQuestion(p.question.clone()));
        audits.push(PairAudit {
            id: p.id.clone(),
            correct_answer_iteration: p.correct_answer_iteration,
            labels: GroundTruth {
                correct_is_true: known(&p.correct_answer)?,
                incorrect_is_false: !known(&p.incorrect_answer)?,
            },
        });
    }
    let mut groups: BTreeMap<usize, Vec<&PairAudit>> = BTreeMap::new();
    for a in &audits {
        groups.entry(a.correct_answer_iteration).or_default().push(a);
    }
    let per_iteration = groups.iter().map(|(&it, g)| rates(Some(it), g)).collect();
    let overall = rates(None, &audits.iter().collect::<Vec<_>>());
    Ok(AuditReport {
        pairs: audits,
        per_iteration,
        overall,
    })
}
