//! Entity-level and word-level linearization with token alignment maps.
//!
//! Entity level: `<H> head words <R> relation words <T> tail words` per
//! triple. Word level: every word of every unit occurrence, each preceded by
//! a `[N]` marker. Both truncate whole trailing triples at the length limit,
//! and unit indices refer to the graph restricted to the kept triples.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::vocab::{self, Vocab};

pub const DEFAULT_MAX_INPUT_LEN: usize = 256;

/// Per-token unit assignment; `None` marks structural tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpanMap {
    units: Vec<Option<usize>>,
    num_units: usize,
}

impl SpanMap {
    pub fn new(units: Vec<Option<usize>>, num_units: usize) -> Self {
        SpanMap { units, num_units }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn num_units(&self) -> usize {
        self.num_units
    }

    pub fn unit(&self, token: usize) -> Option<usize> {
        self.units[token]
    }

    pub fn units(&self) -> &[Option<usize>] {
        &self.units
    }

    /// Number of tokens assigned to each unit.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_units];
        for u in self.units.iter().flatten() {
            c[*u] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Head,
    Relation,
    Tail,
}

/// One word occurrence in the word-level linearization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WordNode {
    /// Owning unit in the (truncated) graph.
    pub unit: usize,
    /// Triple whose head/relation/tail this word belongs to.
    pub triple: usize,
    pub role: Role,
    /// 0-based word offset inside the unit occurrence.
    pub offset: usize,
}

impl WordNode {
    pub fn same_occurrence(&self, other: &WordNode) -> bool {
        self.triple == other.triple && self.role == other.role
    }
}

/// Word node `k` owns tokens `2k` (`[N]`) and `2k + 1` (the word).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WordNodeMap {
    nodes: Vec<WordNode>,
}

impl WordNodeMap {
    pub fn new(nodes: Vec<WordNode>) -> Self {
        WordNodeMap { nodes }
    }

    pub fn nodes(&self) -> &[WordNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_of_token(&self, token: usize) -> usize {
        token / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityLinearization {
    pub tokens: Vec<u32>,
    pub spans: SpanMap,
    /// Graph restricted to the kept triples.
    pub graph: KnowledgeGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordLinearization {
    pub tokens: Vec<u32>,
    pub words: WordNodeMap,
    pub graph: KnowledgeGraph,
}

fn entity_triple_len(t: &Triple) -> usize {
    3 + t.head.split_whitespace().count()
        + t.relation.split_whitespace().count()
        + t.tail.split_whitespace().count()
}

fn word_triple_len(t: &Triple) -> usize {
    2 * (entity_triple_len(t) - 3)
}

/// Number of leading triples whose cumulative cost fits in `max_len`.
fn kept_triples(g: &KnowledgeGraph, max_len: usize, cost: fn(&Triple) -> usize) -> Result<usize> {
    let mut total = 0;
    for (i, t) in g.triples().iter().enumerate() {
        let c = cost(t);
        if total + c > max_len {
            if i == 0 {
                return Err(Error::TripleTooLong {
                    needed: c,
                    limit: max_len,
                });
            }
            return Ok(i);
        }
        total += c;
    }
    Ok(g.triples().len())
}

/// Number of triples both linearizations keep under `max_len`.
pub fn common_prefix(g: &KnowledgeGraph, max_len: usize) -> Result<usize> {
    Ok(kept_triples(g, max_len, entity_triple_len)?.min(kept_triples(g, max_len, word_triple_len)?))
}

pub fn linearize_entity_level(
    g: &KnowledgeGraph,
    v: &Vocab,
    max_len: usize,
) -> Result<EntityLinearization> {
    let graph = g.prefix(kept_triples(g, max_len, entity_triple_len)?);
    let mut tokens = Vec::new();
    let mut units = Vec::new();
    for (i, t) in graph.triples().iter().enumerate() {
        for (marker, label, unit) in [
            (vocab::HEAD, &t.head, graph.head_unit(i)),
            (vocab::REL, &t.relation, graph.relation_unit(i)),
            (vocab::TAIL, &t.tail, graph.tail_unit(i)),
        ] {
            tokens.push(marker);
            units.push(None);
            for w in label.split_whitespace() {
                tokens.push(v.id(w));
                units.push(Some(unit));
            }
        }
    }
    let spans = SpanMap::new(units, graph.num_units());
    Ok(EntityLinearization {
        tokens,
        spans,
        graph,
    })
}

pub fn linearize_word_level(
    g: &KnowledgeGraph,
    v: &Vocab,
    max_len: usize,
) -> Result<WordLinearization> {
    let graph = g.prefix(kept_triples(g, max_len, word_triple_len)?);
    let mut tokens = Vec::new();
    let mut nodes = Vec::new();
    for (i, t) in graph.triples().iter().enumerate() {
        for (role, label, unit) in [
            (Role::Head, &t.head, graph.head_unit(i)),
            (Role::Relation, &t.relation, graph.relation_unit(i)),
            (Role::Tail, &t.tail, graph.tail_unit(i)),
        ] {
            for (offset, w) in label.split_whitespace().enumerate() {
                tokens.push(vocab::NODE);
                tokens.push(v.id(w));
                nodes.push(WordNode {
                    unit,
                    triple: i,
                    role,
                    offset,
                });
            }
        }
    }
    Ok(WordLinearization {
        tokens,
        words: WordNodeMap::new(nodes),
        graph,
    })
}

/// Re-parses an entity-level token stream into triples.
pub fn parse_entity_sequence(tokens: &[&str]) -> Option<Vec<Triple>> {
    let mut triples = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut parts: [Vec<&str>; 3] = Default::default();
        for (k, marker) in ["<H>", "<R>", "<T>"].iter().enumerate() {
            if tokens.get(i) != Some(marker) {
                return None;
            }
            i += 1;
            while i < tokens.len() && !["<H>", "<R>", "<T>"].contains(&tokens[i]) {
                parts[k].push(tokens[i]);
                i += 1;
            }
            if parts[k].is_empty() {
                return None;
            }
        }
        triples.push(Triple::new(
            &parts[0].join(" "),
            &parts[1].join(" "),
            &parts[2].join(" "),
        ));
    }
    Some(triples)
}
