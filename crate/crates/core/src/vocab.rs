//! Whitespace vocabulary with fixed reserved ids.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::kg::Corpus;

pub const HEAD: u32 = 0;
pub const REL: u32 = 1;
pub const TAIL: u32 = 2;
pub const NODE: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;
pub const PAD: u32 = 6;
pub const UNK: u32 = 7;

/// Reserved tokens, indexed by their id.
pub const RESERVED_TOKENS: [&str; 8] = ["<H>", "<R>", "<T>", "[N]", "<bos>", "<eos>", "<pad>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Vocabulary over the given words; reserved tokens take ids 0..8 and the
    /// rest follow in lexicographic order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut rest: Vec<&str> = words
            .into_iter()
            .filter(|w| !RESERVED_TOKENS.contains(w))
            .collect();
        rest.sort_unstable();
        rest.dedup();
        let tokens: Vec<String> = RESERVED_TOKENS
            .iter()
            .copied()
            .chain(rest)
            .map(str::to_string)
            .collect();
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED_TOKENS[UNK as usize])
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins tokens with single spaces, skipping nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Counts every whitespace word of every triple and reference, keeping those
/// seen at least `min_count` times.
pub fn build_vocab(corpus: &Corpus, min_count: usize) -> Vocab {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in &corpus.examples {
        for t in ex.graph.triples() {
            for part in [&t.head, &t.relation, &t.tail] {
                for w in part.split_whitespace() {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        for r in &ex.references {
            for w in r.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    Vocab::from_words(
        counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .map(|(w, _)| w),
    )
}
