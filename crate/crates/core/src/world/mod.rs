//! Synthetic question-answering world.
//!
//! Entities carry one value per attribute. Every value domain has a
//! misconception value that is never true but that noisy pretraining
//! documents repeat, so a model trained on the corpus has room to become
//! more truthful. Attributes come in pairs sharing a value domain: one is
//! asked with in-domain templates, the other with out-of-domain ones.

mod corpus;
mod facts;
mod pools;
mod vocab;

pub use corpus::{
    instruction_line, make_heldout_corpus, make_pretrain_corpus, pair_lines, qa_text, CorpusConfig, CorpusDoc,
    DocKind, PretrainCorpus, INSTRUCTION,
};
pub use facts::{
    build_world, Attribute, FactWorld, Family, QuestionRef, ValueDomain, CORPUS_TEMPLATES, MAX_ATTRIBUTES,
    MAX_ENTITIES, TEMPLATES_A, TEMPLATES_B,
};
pub use pools::{
    make_mc_benchmark, make_question_pools, McQuestion, QaDatasetSplit, QaRecord, QuestionPools, SplitName,
    IN_DOMAIN_RATIO,
};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, NEWLINE, UNK};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("world needs at least 2 entities and 2 attributes, got {entities} and {attributes}")]
    CountsTooSmall { entities: usize, attributes: usize },
    #[error("world supports at most {max_e} entities and {max_a} attributes, got {entities} and {attributes}", max_e = MAX_ENTITIES, max_a = MAX_ATTRIBUTES)]
    CountsTooLarge { entities: usize, attributes: usize },
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("question not in world: `{0}`")]
    UnknownQuestion(String),
    #[error("noise rate {0} outside [0, 0.5)")]
    BadNoiseRate(f64),
    #[error("bad corpus config: {0}")]
    BadCorpusConfig(String),
    #[error("world too small for disjoint pools ({in_domain_facts} in-domain facts, {ood_attributes} OOD attributes)")]
    PoolsTooSmall { in_domain_facts: usize, ood_attributes: usize },
    #[error("item {id} needs {needed} distractors, has {available}")]
    InsufficientDistractors { id: String, needed: usize, available: usize },
}

#[cfg(test)]
mod tests;
