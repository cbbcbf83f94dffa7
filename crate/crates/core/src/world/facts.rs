use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::vocab::{TokenId, Vocabulary};
use super::WorldError;
use crate::seeds;

/// Question template family. In-domain attributes use family A, OOD
/// attributes use family B; the two share no template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Family {
    A,
    B,
}

/// Templates per family. The first [`CORPUS_TEMPLATES`] phrase the QA
/// documents of the pretraining corpus; the rest phrase pool questions.
pub const TEMPLATES_A: [&str; 5] = [
    "what is the {attr} of {entity} ?",
    "what {attr} does {entity} have ?",
    "do you know the {attr} of {entity} ?",
    "which {attr} does {entity} have ?",
    "can you name the {attr} of {entity} ?",
];

pub const TEMPLATES_B: [&str; 5] = [
    "in the old records , which {attr} was listed for {entity} ?",
    "according to the archive , what {attr} did {entity} have ?",
    "in the ledger , what was the {attr} of {entity} ?",
    "per the archive , which {attr} was listed for {entity} ?",
    "in the old ledger , what {attr} did {entity} have ?",
];

pub const CORPUS_TEMPLATES: usize = 3;

struct DomainDef {
    name: &'static str,
    values: [&'static str; 9],
    myth: &'static str,
    attrs: [&'static str; 2],
}

const DOMAINS: [DomainDef; 5] = [
    DomainDef {
        name: "colors",
        values: ["red", "blue", "green", "yellow", "purple", "orange", "white", "black", "brown"],
        myth: "gold",
        attrs: ["color", "banner"],
    },
    DomainDef {
        name: "cities",
        values: ["paris", "rome", "cairo", "lima", "oslo", "tokyo", "delhi", "sydney", "berlin"],
        myth: "atlantis",
        attrs: ["home", "birthplace"],
    },
    DomainDef {
        name: "foods",
        values: ["bread", "rice", "soup", "fish", "cheese", "apples", "beans", "honey", "pasta"],
        myth: "candy",
        attrs: ["meal", "snack"],
    },
    DomainDef {
        name: "animals",
        values: ["cat", "dog", "horse", "owl", "fox", "wolf", "bear", "deer", "goat"],
        myth: "dragon",
        attrs: ["pet", "mascot"],
    },
    DomainDef {
        name: "metals",
        values: ["iron", "copper", "tin", "silver", "zinc", "lead", "nickel", "bronze", "steel"],
        myth: "mithril",
        attrs: ["tool", "coin"],
    },
];

const SYLLABLES: [&str; 20] = [
    "blick", "zorp", "mave", "quil", "dran", "fesk", "tove", "grum", "skel", "wub", "narn", "yith",
    "plov", "kesh", "drom", "vune", "torb", "glim", "sarn", "hux",
];

/// Words of the fixed prompt and answer grammar.
pub const GRAMMAR_WORDS: &str = "Q: A: Correct Incorrect Given answer: the of is . Consider following question: \
Please generate a correct answer and an incorrect answer. Make sure answers are plausible. \
There no need to give explanation.";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueDomain {
    pub name: String,
    /// Values that can be true of some entity.
    pub values: Vec<String>,
    /// A popular misconception: never the true value of any fact.
    pub myth: String,
}

impl ValueDomain {
    /// Every candidate answer: true-able values then the misconception.
    pub fn all_values(&self) -> Vec<&str> {
        self.values.iter().map(|s| s.as_str()).chain(std::iter::once(self.myth.as_str())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Attribute {
    pub name: String,
    pub domain: usize,
    pub family: Family,
}

/// Where a question text comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuestionRef {
    pub entity: usize,
    pub attribute: usize,
    pub template: usize,
}

impl QuestionRef {
    pub fn id(&self) -> String {
        format!("e{}-a{}-t{}", self.entity, self.attribute, self.template)
    }
}

/// Deterministic synthetic QA universe.
#[derive(Clone, Debug, Serialize)]
pub struct FactWorld {
    pub seed: u64,
    pub entities: Vec<String>,
    pub attributes: Vec<Attribute>,
    pub domains: Vec<ValueDomain>,
    /// `facts[e][a]` indexes `domains[attributes[a].domain].values`.
    pub facts: Vec<Vec<usize>>,
    #[serde(skip)]
    vocab: Vocabulary,
    #[serde(skip)]
    questions: HashMap<String, QuestionRef>,
}

impl PartialEq for FactWorld {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.entities == other.entities
            && self.attributes == other.attributes
            && self.domains == other.domains
            && self.facts == other.facts
    }
}

pub const MAX_ENTITIES: usize = SYLLABLES.len() * 10;
pub const MAX_ATTRIBUTES: usize = DOMAINS.len() * 2;

/// Build a world of `num_entities` entities with `num_attributes` attributes.
///
/// Attribute `i` draws values from domain `i / 2`; even attributes are
/// in-domain (family A), odd ones out-of-domain (family B), so paired
/// attributes share a value domain but never a question template.
pub fn build_world(seed: u64, num_entities: usize, num_attributes: usize) -> Result<FactWorld, WorldError> {
    if num_entities < 2 || num_attributes < 2 {
        return Err(WorldError::CountsTooSmall {
            entities: num_entities,
            attributes: num_attributes,
        });
    }
    if num_entities > MAX_ENTITIES || num_attributes > MAX_ATTRIBUTES {
        return Err(WorldError::CountsTooLarge {
            entities: num_entities,
            attributes: num_attributes,
        });
    }
    let mut names: Vec<String> = SYLLABLES
        .iter()
        .flat_map(|s| (0..10).map(move |d| format!("{}-{}", s, d)))
        .collect();
    names.shuffle(&mut seeds::rng(seed, "entities", 0));
    names.truncate(num_entities);

    let used_domains = num_attributes.div_ceil(2);
    let domains: Vec<ValueDomain> = DOMAINS[..used_domains]
        .iter()
        .map(|d| ValueDomain {
            name: d.name.to_string(),
            values: d.values.iter().map(|s| s.to_string()).collect(),
            myth: d.myth.to_string(),
        })
        .collect();
    let attributes: Vec<Attribute> = (0..num_attributes)
        .map(|i| Attribute {
            name: DOMAINS[i / 2].attrs[i % 2].to_string(),
            domain: i / 2,
            family: if i % 2 == 0 { Family::A } else { Family::B },
        })
        .collect();

    let mut rng = seeds::rng(seed, "facts", 0);
    let facts: Vec<Vec<usize>> = (0..num_entities)
        .map(|_| {
            attributes
                .iter()
                .map(|a| rand::Rng::gen_range(&mut rng, 0..domains[a.domain].values.len()))
                .collect()
        })
        .collect();

    let mut world = FactWorld {
        seed,
        entities: names,
        attributes,
        domains,
        facts,
        vocab: Vocabulary::new(Vec::<String>::new()),
        questions: HashMap::new(),
    };
    world.vocab = world.build_vocab();
    world.questions = world.index_questions();
    Ok(world)
}

impl FactWorld {
    fn build_vocab(&self) -> Vocabulary {
        let mut words: Vec<String> = GRAMMAR_WORDS.split_whitespace().map(String::from).collect();
        for t in TEMPLATES_A.iter().chain(TEMPLATES_B.iter()) {
            words.extend(
                t.split(' ')
                    .filter(|w| !w.starts_with('{'))
                    .map(String::from),
            );
        }
        words.extend(self.attributes.iter().map(|a| a.name.clone()));
        for d in &self.domains {
            words.extend(d.all_values().into_iter().map(String::from));
        }
        words.extend(self.entities.iter().cloned());
        Vocabulary::new(words)
    }

    fn index_questions(&self) -> HashMap<String, QuestionRef> {
        let mut map = HashMap::new();
        for e in 0..self.entities.len() {
            for a in 0..self.attributes.len() {
                for t in 0..self.templates(self.attributes[a].family).len() {
                    let q = QuestionRef {
                        entity: e,
                        attribute: a,
                        template: t,
                    };
                    map.insert(self.question(q), q);
                }
            }
        }
        map
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, WorldError> {
        self.vocab.encode(text)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, WorldError> {
        self.vocab.decode(ids)
    }

    pub fn templates(&self, family: Family) -> &'static [&'static str] {
        match family {
            Family::A => &TEMPLATES_A,
            Family::B => &TEMPLATES_B,
        }
    }

    pub fn num_facts(&self) -> usize {
        self.entities.len() * self.attributes.len()
    }

    pub fn question(&self, q: QuestionRef) -> String {
        let attr = &self.attributes[q.attribute];
        self.templates(attr.family)[q.template]
            .replace("{attr}", &attr.name)
            .replace("{entity}", &self.entities[q.entity])
    }

    pub fn statement(&self, entity: usize, attribute: usize) -> String {
        format!(
            "the {} of {} is {} .",
            self.attributes[attribute].name,
            self.entities[entity],
            self.truth(entity, attribute)
        )
    }

    pub fn domain_of(&self, attribute: usize) -> &ValueDomain {
        &self.domains[self.attributes[attribute].domain]
    }

    pub fn truth(&self, entity: usize, attribute: usize) -> &str {
        &self.domain_of(attribute).values[self.facts[entity][attribute]]
    }

    pub fn myth(&self, attribute: usize) -> &str {
        &self.domain_of(attribute).myth
    }

    /// Wrong answers for a fact: the misconception first, then the other
    /// values in domain order.
    pub fn wrong_answers(&self, entity: usize, attribute: usize) -> Vec<String> {
        let truth = self.truth(entity, attribute);
        let d = self.domain_of(attribute);
        std::iter::once(d.myth.clone())
            .chain(d.values.iter().filter(|v| v.as_str() != truth).cloned())
            .collect()
    }

    pub fn lookup(&self, question: &str) -> Option<QuestionRef> {
        self.questions.get(question).copied()
    }

    /// Exact ground-truth check of an answer to a world question.
    pub fn is_correct(&self, question: &str, answer: &str) -> Result<bool, WorldError> {
        let q = self
            .lookup(question)
            .ok_or_else(|| WorldError::UnknownQuestion(question.to_string()))?;
        Ok(answer == self.truth(q.entity, q.attribute))
    }

    /// Domain of the value `word`, if it is an answer value.
    pub fn value_domain(&self, word: &str) -> Option<usize> {
        self.domains
            .iter()
            .position(|d| d.myth == word || d.values.iter().any(|v| v == word))
    }

    pub fn in_domain_attributes(&self) -> Vec<usize> {
        (0..self.attributes.len())
            .filter(|&a| self.attributes[a].family == Family::A)
            .collect()
    }

    pub fn ood_attributes(&self) -> Vec<usize> {
        (0..self.attributes.len())
            .filter(|&a| self.attributes[a].family == Family::B)
            .collect()
    }
}
