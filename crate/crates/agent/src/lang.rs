//! Instruction tokenization and the dataset vocabulary.
//!
//! Tokens are lowercased alphanumeric runs. The vocabulary is the sorted set
//! of tokens seen in the training corpus; unknown tokens at use time hash
//! into a fixed block of overflow rows, and one final row is reserved for
//! padding.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Instructions are padded or truncated to this many tokens.
pub const MAX_TOKENS: usize = 16;
pub const DEFAULT_OOV_BUCKETS: usize = 8;

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Token-to-row mapping for the language embedding table.
/// Row layout: [known tokens | overflow buckets | pad].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    buckets: usize,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, buckets: usize) -> Vocab {
        let mut set = std::collections::BTreeSet::new();
        for text in corpus {
            set.extend(tokenize(text));
        }
        let tokens: Vec<String> = set.into_iter().collect();
        let mut v = Vocab { tokens, buckets, index: BTreeMap::new() };
        v.rebuild_index();
        v
    }

    /// Restores the derived index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index =
            self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn known_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    /// Total embedding-table rows, pad row included.
    pub fn table_rows(&self) -> usize {
        self.tokens.len() + self.buckets + 1
    }

    pub fn pad_id(&self) -> usize {
        self.tokens.len() + self.buckets
    }

    pub fn token_id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => self.tokens.len() + (fnv1a(token) % self.buckets as u64) as usize,
        }
    }

    pub fn ids(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.token_id(t)).collect()
    }

    /// Fixed-length ids: truncated past MAX_TOKENS, pad-filled otherwise.
    pub fn padded_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = self.ids(text);
        ids.truncate(MAX_TOKENS);
        ids.resize(MAX_TOKENS, self.pad_id());
        ids
    }
}
