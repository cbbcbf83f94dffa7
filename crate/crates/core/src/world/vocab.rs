use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::WorldError;

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const NEWLINE: &str = "\n";
pub const UNK: &str = "<unk>";

/// Closed word-level vocabulary.
///
/// Text is split into lines on `\n` and lines into words on single spaces.
/// Each newline is its own token. `<unk>` has an id but is never produced:
/// encoding an unknown word is an error.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Build from words; markers come first, duplicates are dropped, order
    /// of first appearance is kept.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = [BOS, EOS, NEWLINE, UNK].iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.contains(' ') || w.contains('\n') || index.contains_key(w) {
                continue;
            }
            index.insert(w.to_string(), tokens.len() as TokenId);
            tokens.push(w.to_string());
        }
        Self { tokens, index }
    }

    /// Restore the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn newline(&self) -> TokenId {
        2
    }

    pub fn unk(&self) -> TokenId {
        3
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, WorldError> {
        let mut out = Vec::new();
        if text.is_empty() {
            return Ok(out);
        }
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                out.push(self.newline());
            }
            if line.is_empty() {
                continue;
            }
            for word in line.split(' ') {
                match self.index.get(word) {
                    Some(&id) if id != self.unk() => out.push(id),
                    _ => return Err(WorldError::UnknownWord(word.to_string())),
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, WorldError> {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            let tok = self.token(id).ok_or(WorldError::UnknownToken(id))?;
            if id == self.newline() {
                out.push('\n');
                line_start = true;
            } else {
                if !line_start {
                    out.push(' ');
                }
                out.push_str(tok);
                line_start = false;
            }
        }
        Ok(out)
    }
}
