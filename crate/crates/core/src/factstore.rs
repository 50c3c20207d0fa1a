//! Miniature evidence store: (subject, relation, value) triples, token-overlap
//! retrieval, and the lexical entailment factor f.
//!
//! The store stands in for the external knowledge base of a retrieval
//! pipeline. Retrieval scores a fact by how many distinct query tokens hit
//! its subject or relation; the entailment factor maps a token's support in
//! the retrieved evidence onto [f_min, 1]. f_min stays strictly positive
//! because the reweighting layer adds ln(f * ...) to attention logits and a
//! hard -inf mask is not what "reweighted downwards" means.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::StoreError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub value: String,
}

impl Fact {
    pub fn new(subject: &str, relation: &str, value: &str) -> Self {
        Fact {
            subject: subject.to_string(),
            relation: relation.to_string(),
            value: value.to_string(),
        }
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.subject.is_empty() {
            return Err(StoreError::EmptyField("subject"));
        }
        if self.relation.is_empty() {
            return Err(StoreError::EmptyField("relation"));
        }
        if self.value.is_empty() {
            return Err(StoreError::EmptyField("value"));
        }
        Ok(())
    }
}

/// Immutable indexed store. (subject, relation) pairs are unique.
#[derive(Clone, Debug)]
pub struct FactStore {
    facts: Vec<Fact>,
    /// token -> ids of facts whose subject or relation equals the token.
    key_index: BTreeMap<String, Vec<usize>>,
}

impl FactStore {
    /// Index a fact list. A duplicate (subject, relation) with a different
    /// value is a conflict naming both facts; exact duplicates collapse.
    pub fn ingest(facts: Vec<Fact>) -> Result<Self, StoreError> {
        let mut kept: Vec<Fact> = Vec::with_capacity(facts.len());
        let mut by_key: BTreeMap<(String, String), usize> = BTreeMap::new();
        for fact in facts {
            fact.validate()?;
            let key = (fact.subject.clone(), fact.relation.clone());
            match by_key.get(&key) {
                Some(&idx) => {
                    if kept[idx].value != fact.value {
                        return Err(StoreError::Conflict {
                            subject: fact.subject,
                            relation: fact.relation,
                            existing: kept[idx].value.clone(),
                            incoming: fact.value,
                        });
                    }
                }
                None => {
                    by_key.insert(key, kept.len());
                    kept.push(fact);
                }
            }
        }
        let mut key_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (id, fact) in kept.iter().enumerate() {
            for tok in [&fact.subject, &fact.relation] {
                let ids = key_index.entry(tok.clone()).or_default();
                if ids.last() != Some(&id) {
                    ids.push(id);
                }
            }
        }
        Ok(FactStore {
            facts: kept,
            key_index,
        })
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    /// Top-k facts by distinct-query-token overlap with subject and relation;
    /// zero-score facts are excluded, ties break by ingestion order.
    pub fn retrieve(&self, query_tokens: &[String], k: usize) -> EvidenceSet {
        let query: BTreeSet<&str> = query_tokens.iter().map(|s| s.as_str()).collect();
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for tok in &query {
            if let Some(ids) = self.key_index.get(*tok) {
                for &id in ids {
                    *scores.entry(id).or_insert(0.0) += 1.0;
                }
            }
        }
        // BTreeMap iteration is id-ascending, so a stable sort by descending
        // score preserves ingestion order among ties.
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
        ranked.truncate(k);
        EvidenceSet {
            facts: ranked.iter().map(|&(id, _)| self.facts[id].clone()).collect(),
            scores: ranked.iter().map(|&(_, s)| s).collect(),
        }
    }
}

/// Retrieved facts ordered by non-increasing score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub facts: Vec<Fact>,
    pub scores: Vec<f64>,
}

impl EvidenceSet {
    pub fn empty() -> Self {
        EvidenceSet {
            facts: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Every field token of every retrieved fact.
    pub fn field_tokens(&self) -> BTreeSet<&str> {
        self.facts
            .iter()
            .flat_map(|f| [f.subject.as_str(), f.relation.as_str(), f.value.as_str()])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntailmentMode {
    /// f = 1 when the token appears verbatim in any retrieved fact field,
    /// f_min otherwise.
    Binary,
    /// f = f_min + (1 - f_min) * (fraction of the token's character 3-grams
    /// present in the evidence fields' 3-grams).
    Overlap,
}

pub const DEFAULT_F_MIN: f64 = 0.1;

fn char_trigrams(token: &str) -> Vec<String> {
    let chars: Vec<char> = token.chars().collect();
    if chars.len() < 3 {
        return alloc::vec![token.to_string()];
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Evidence-entailment factor in [f_min, 1] for one node token.
///
/// `_role` is carried for signature stability with richer entailment
/// backends; the lexical proxy scores inputs and outputs identically.
pub fn entailment_factor(
    node_token: &str,
    _role: crate::graph::NodeRole,
    evidence: &EvidenceSet,
    mode: EntailmentMode,
    f_min: f64,
) -> f64 {
    debug_assert!(f_min > 0.0 && f_min <= 1.0);
    match mode {
        EntailmentMode::Binary => {
            if evidence.field_tokens().contains(node_token) {
                1.0
            } else {
                f_min
            }
        }
        EntailmentMode::Overlap => {
            let grams = char_trigrams(node_token);
            if grams.is_empty() {
                return f_min;
            }
            let evidence_grams: BTreeSet<String> = evidence
                .facts
                .iter()
                .flat_map(|f| {
                    [&f.subject, &f.relation, &f.value]
                        .into_iter()
                        .flat_map(|field| char_trigrams(field))
                })
                .collect();
            let matched = grams
                .iter()
                .filter(|g| evidence_grams.contains(g.as_str()))
                .count();
            let fraction = matched as f64 / grams.len() as f64;
            f_min + (1.0 - f_min) * fraction
        }
    }
}
