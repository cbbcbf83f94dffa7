use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::facts::{Family, FactWorld, QuestionRef, CORPUS_TEMPLATES};
use super::WorldError;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    PretrainCorpus,
    InDomainTrain,
    InDomainTest,
    OodQuestions,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::PretrainCorpus => "pretrain-corpus",
            SplitName::InDomainTrain => "in-domain-train",
            SplitName::InDomainTest => "in-domain-test",
            SplitName::OodQuestions => "ood-questions",
        }
    }
}

/// One dataset line. The first incorrect answer is the domain's
/// misconception.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub split: SplitName,
    pub question: String,
    pub correct_answers: Vec<String>,
    pub incorrect_answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaDatasetSplit {
    pub name: SplitName,
    pub records: Vec<QaRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionPools {
    pub pretrain_corpus: QaDatasetSplit,
    pub in_domain_train: QaDatasetSplit,
    pub in_domain_test: QaDatasetSplit,
    pub ood: QaDatasetSplit,
}

impl QuestionPools {
    pub fn splits(&self) -> [&QaDatasetSplit; 4] {
        [&self.pretrain_corpus, &self.in_domain_train, &self.in_domain_test, &self.ood]
    }
}

/// Multiple-choice item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McQuestion {
    pub id: String,
    pub question: String,
    pub correct_answers: Vec<String>,
    pub incorrect_answers: Vec<String>,
}

/// Train:test ratio of the in-domain facts.
pub const IN_DOMAIN_RATIO: usize = 6;

fn record(world: &FactWorld, q: QuestionRef, split: SplitName) -> QaRecord {
    QaRecord {
        id: q.id(),
        split,
        question: world.question(q),
        correct_answers: vec![world.truth(q.entity, q.attribute).to_string()],
        incorrect_answers: world.wrong_answers(q.entity, q.attribute),
    }
}

/// Partition the world's questions.
///
/// Corpus templates of both families form the pretrain-corpus split. The
/// remaining family-A templates over in-domain attributes are split 6:1 by
/// fact into train and test; the remaining family-B templates over OOD
/// attributes form the OOD pool.
pub fn make_question_pools(world: &FactWorld) -> Result<QuestionPools, WorldError> {
    let ind_attrs = world.in_domain_attributes();
    let ood_attrs = world.ood_attributes();
    let n = world.entities.len();
    let mut ind_facts: Vec<(usize, usize)> = (0..n)
        .flat_map(|e| ind_attrs.iter().map(move |&a| (e, a)))
        .collect();
    let test_n = (ind_facts.len() as f64 / (IN_DOMAIN_RATIO + 1) as f64).round() as usize;
    if ood_attrs.is_empty() || test_n == 0 || test_n == ind_facts.len() {
        return Err(WorldError::PoolsTooSmall {
            in_domain_facts: ind_facts.len(),
            ood_attributes: ood_attrs.len(),
        });
    }
    ind_facts.shuffle(&mut seeds::rng(world.seed, "in-domain-split", 0));
    let mut test_facts = ind_facts[..test_n].to_vec();
    let mut train_facts = ind_facts[test_n..].to_vec();
    test_facts.sort_unstable();
    train_facts.sort_unstable();

    let pool_records = |facts: &[(usize, usize)], family: Family, split: SplitName| -> Vec<QaRecord> {
        let mut out = Vec::new();
        for &(e, a) in facts {
            for t in CORPUS_TEMPLATES..world.templates(family).len() {
                out.push(record(
                    world,
                    QuestionRef {
                        entity: e,
                        attribute: a,
                        template: t,
                    },
                    split,
                ));
            }
        }
        out
    };

    let mut corpus = Vec::new();
    for e in 0..n {
        for a in 0..world.attributes.len() {
            for t in 0..CORPUS_TEMPLATES {
                corpus.push(record(
                    world,
                    QuestionRef {
                        entity: e,
                        attribute: a,
                        template: t,
                    },
                    SplitName::PretrainCorpus,
                ));
            }
        }
    }
    let ood_facts: Vec<(usize, usize)> = (0..n)
        .flat_map(|e| ood_attrs.iter().map(move |&a| (e, a)))
        .collect();

    Ok(QuestionPools {
        pretrain_corpus: QaDatasetSplit {
            name: SplitName::PretrainCorpus,
            records: corpus,
        },
        in_domain_train: QaDatasetSplit {
            name: SplitName::InDomainTrain,
            records: pool_records(&train_facts, Family::A, SplitName::InDomainTrain),
        },
        in_domain_test: QaDatasetSplit {
            name: SplitName::InDomainTest,
            records: pool_records(&test_facts, Family::A, SplitName::InDomainTest),
        },
        ood: QaDatasetSplit {
            name: SplitName::OodQuestions,
            records: pool_records(&ood_facts, Family::B, SplitName::OodQuestions),
        },
    })
}

/// One item per record: all correct answers, the first incorrect answer
/// (the misconception) plus a seeded sample of the others.
pub fn make_mc_benchmark(split: &QaDatasetSplit, distractors_per_item: usize) -> Result<Vec<McQuestion>, WorldError> {
    let mut out = Vec::with_capacity(split.records.len());
    for r in &split.records {
        if r.correct_answers.is_empty() || distractors_per_item == 0 || r.incorrect_answers.len() < distractors_per_item {
            return Err(WorldError::InsufficientDistractors {
                id: r.id.clone(),
                needed: distractors_per_item,
                available: r.incorrect_answers.len(),
            });
        }
        let mut rest: Vec<String> = r.incorrect_answers[1..].to_vec();
        rest.shuffle(&mut seeds::rng_for(0, "mc-distractors", &r.id));
        let mut incorrect = vec![r.incorrect_answers[0].clone()];
        incorrect.extend(rest.into_iter().take(distractors_per_item - 1));
        out.push(McQuestion {
            id: r.id.clone(),
            question: r.question.clone(),
            correct_answers: r.correct_answers.clone(),
            incorrect_answers: incorrect,
        });
    }
    Ok(out)
}
