//! Gradual self-truthifying of a small causal language model on a
//! synthetic question-answering world.

pub mod datagen;
pub mod eval;
pub mod jsonl;
pub mod lm;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod seeds;
pub mod train;
pub mod world;
