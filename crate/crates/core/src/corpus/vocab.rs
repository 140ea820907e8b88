use super::CodeSample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Token index with document frequencies. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_index: BTreeMap<String, usize>,
    doc_freq: BTreeMap<String, usize>,
    min_doc_freq: usize,
}

/// Keeps every token that occurs in at least `min_doc_freq` samples. Kept
/// tokens are indexed from 2 in lexicographic order.
pub fn build_vocab(samples: &[CodeSample], min_doc_freq: usize) -> Vocabulary {
    let min_doc_freq = min_doc_freq.max(1);
    let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
    for s in samples {
        let unique: BTreeSet<&String> = s.tokens.iter().collect();
        for t in unique {
            *doc_freq.entry(t.clone()).or_default() += 1;
        }
    }
    let token_to_index = doc_freq
        .iter()
        .filter(|(_, &df)| df >= min_doc_freq)
        .enumerate()
        .map(|(i, (t, _))| (t.clone(), i + 2))
        .collect();
    Vocabulary {
        token_to_index,
        doc_freq,
        min_doc_freq,
    }
}

impl Vocabulary {
    /// Number of indices including the two reserved ones.
    pub fn len(&self) -> usize {
        self.token_to_index.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_index.is_empty()
    }

    pub fn min_doc_freq(&self) -> usize {
        self.min_doc_freq
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_index.contains_key(token)
    }

    /// Number of samples that contained `token` at build time (0 if never seen).
    pub fn doc_freq(&self, token: &str) -> usize {
        self.doc_freq.get(token).copied().unwrap_or(0)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> impl Iterator<Item = (&str, usize)> {
        self.token_to_index.iter().map(|(t, &i)| (t.as_str(), i))
    }

    /// Content hash over the kept token → index map.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (t, i) in &self.token_to_index {
            h.update(t.as_bytes());
            h.update([0u8]);
            h.update((*i as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
