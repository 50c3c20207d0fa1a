//! Whitespace-token vocabulary: a sorted string-to-id map.
//!
//! Token-level analysis is the whole point here, so there is no subword
//! machinery; the id order is lexicographic over the unique token strings,
//! which makes the mapping reproducible from any corpus permutation.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

pub type TokenId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// Build from any iterator of token strings; duplicates collapse.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let unique: alloc::collections::BTreeSet<&str> = tokens.into_iter().collect();
        let tokens: Vec<String> = unique.into_iter().map(|t| t.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }

    /// Restore the id index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<TokenId>, ModelError> {
        tokens
            .iter()
            .map(|t| {
                self.id(t).ok_or_else(|| ModelError::Checkpoint(alloc::format!(
                    "token `{t}` not in vocabulary"
                )))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}
