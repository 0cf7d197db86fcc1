//! Graph structure matrices: the entity/relation label matrix, the bipartite
//! adjacency, and the word-level relative position labels.

use std::collections::VecDeque;
use std::fmt;

use serde::Serialize;

use crate::kg::{KnowledgeGraph, UnitKind};
use crate::linearize::WordNodeMap;

pub const DEFAULT_D_CLIP: usize = 16;
pub const DEFAULT_P_CLIP: usize = 16;

/// Incidence between an entity unit and a relation unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Incidence {
    pub entity: usize,
    pub relation: usize,
    /// `true` for head→relation, `false` for relation→tail.
    pub head_side: bool,
}

/// Entities on one side, relation occurrences on the other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BipartiteGraph {
    pub num_entities: usize,
    pub num_units: usize,
    pub edges: Vec<Incidence>,
}

impl BipartiteGraph {
    pub fn is_entity(&self, unit: usize) -> bool {
        unit < self.num_entities
    }

    pub fn incident(&self, entity: usize, relation: usize) -> bool {
        self.edges
            .iter()
            .any(|e| e.entity == entity && e.relation == relation)
    }
}

pub fn build_bipartite(g: &KnowledgeGraph) -> BipartiteGraph {
    let mut edges = Vec::with_capacity(2 * g.num_relations());
    for t in 0..g.num_relations() {
        let r = g.relation_unit(t);
        edges.push(Incidence {
            entity: g.head_unit(t),
            relation: r,
            head_side: true,
        });
        edges.push(Incidence {
            entity: g.tail_unit(t),
            relation: r,
            head_side: false,
        });
    }
    BipartiteGraph {
        num_entities: g.num_entities(),
        num_units: g.num_units(),
        edges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityRelLabel {
    None,
    EntEnt,
    EntRel,
    RelEnt,
    SelfLoop,
}

impl EntityRelLabel {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityRelLabel::None => "NONE",
            EntityRelLabel::EntEnt => "ENT_ENT",
            EntityRelLabel::EntRel => "ENT_REL",
            EntityRelLabel::RelEnt => "REL_ENT",
            EntityRelLabel::SelfLoop => "SELF",
        }
    }
}

impl Serialize for EntityRelLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Square<T> {
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Square<T> {
    pub fn filled(size: usize, value: T) -> Self {
        Square {
            size,
            data: vec![value; size * size],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.size + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.size.max(1)).map(<[T]>::to_vec).collect()
    }
}

impl<T: Copy + Serialize> Serialize for Square<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

pub type AdjacencyMatrix = Square<u8>;

pub fn rel_pos_entity(b: &BipartiteGraph) -> Square<EntityRelLabel> {
    let m = b.num_units;
    let mut out = Square::filled(m, EntityRelLabel::None);
    for e in &b.edges {
        out.set(e.entity, e.relation, EntityRelLabel::EntRel);
        out.set(e.relation, e.entity, EntityRelLabel::RelEnt);
    }
    // Entities sharing a relation occurrence are neighbours.
    for r in b.num_entities..m {
        let ends: Vec<usize> = b
            .edges
            .iter()
            .filter(|e| e.relation == r)
            .map(|e| e.entity)
            .collect();
        for &x in &ends {
            for &y in &ends {
                if x != y {
                    out.set(x, y, EntityRelLabel::EntEnt);
                }
            }
        }
    }
    for i in 0..m {
        out.set(i, i, EntityRelLabel::SelfLoop);
    }
    out
}

pub fn adjacency(b: &BipartiteGraph) -> AdjacencyMatrix {
    let mut a = Square::filled(b.num_units, 0u8);
    for e in &b.edges {
        a.set(e.entity, e.relation, 1);
        a.set(e.relation, e.entity, 1);
    }
    for i in 0..b.num_units {
        a.set(i, i, 1);
    }
    a
}

/// Directed graph over word nodes, as adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WordGraph {
    pub successors: Vec<Vec<usize>>,
}

impl WordGraph {
    pub fn len(&self) -> usize {
        self.successors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.successors.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.successors.iter().map(Vec::len).sum()
    }
}

/// Links every word of a triple's head occurrence to every word of its
/// relation occurrence, and relation words to tail words.
pub fn build_word_graph(g: &KnowledgeGraph, wm: &WordNodeMap) -> WordGraph {
    use crate::linearize::Role;
    let mut successors = vec![Vec::new(); wm.len()];
    let mut by_occurrence: Vec<[Vec<usize>; 3]> = vec![Default::default(); g.num_relations()];
    for (k, w) in wm.nodes().iter().enumerate() {
        let slot = match w.role {
            Role::Head => 0,
            Role::Relation => 1,
            Role::Tail => 2,
        };
        by_occurrence[w.triple][slot].push(k);
    }
    for [heads, rels, tails] in &by_occurrence {
        for &h in heads {
            successors[h].extend(rels.iter().copied());
        }
        for &r in rels {
            successors[r].extend(tails.iter().copied());
        }
    }
    WordGraph { successors }
}

/// All-pairs hop distances; `None` is unreachable.
pub type DistanceTable = Square<Option<u32>>;

/// Breadth-first search from every node.
pub fn shortest_paths(wg: &WordGraph) -> DistanceTable {
    let w = wg.len();
    let mut dist = Square::filled(w, None);
    let mut queue = VecDeque::new();
    for src in 0..w {
        dist.set(src, src, Some(0));
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = dist.get(src, u).unwrap_or(0);
            for &v in &wg.successors[u] {
                if dist.get(src, v).is_none() {
                    dist.set(src, v, Some(du + 1));
                    queue.push_back(v);
                }
            }
        }
    }
    dist
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordRelLabel {
    SelfLoop,
    Fwd(u32),
    Bwd(u32),
    SameFwd(u32),
    SameBwd(u32),
    Unreachable,
}

impl WordRelLabel {
    /// Size of the label vocabulary for the given clips.
    pub fn count(d_clip: usize, p_clip: usize) -> usize {
        2 * d_clip + 2 * p_clip + 2
    }

    /// Dense id used to index bias tables. Magnitudes must already be clamped.
    pub fn index(self, d_clip: usize, p_clip: usize) -> usize {
        let (d, p) = (d_clip, p_clip);
        match self {
            WordRelLabel::SelfLoop => 0,
            WordRelLabel::Fwd(x) => x as usize,
            WordRelLabel::Bwd(x) => d + x as usize,
            WordRelLabel::SameFwd(x) => 2 * d + x as usize,
            WordRelLabel::SameBwd(x) => 2 * d + p + x as usize,
            WordRelLabel::Unreachable => 2 * d + 2 * p + 1,
        }
    }
}

impl fmt::Display for WordRelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WordRelLabel::SelfLoop => write!(f, "SELF"),
            WordRelLabel::Fwd(d) => write!(f, "FWD({d})"),
            WordRelLabel::Bwd(d) => write!(f, "BWD({d})"),
            WordRelLabel::SameFwd(p) => write!(f, "SAME_FWD({p})"),
            WordRelLabel::SameBwd(p) => write!(f, "SAME_BWD({p})"),
            WordRelLabel::Unreachable => write!(f, "UNREACHABLE"),
        }
    }
}

impl Serialize for WordRelLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Word-level labels. Same-occurrence pairs are decided before the
/// unreachable case because intra-unit words carry no edges.
pub fn rel_pos_word(
    dist: &DistanceTable,
    wm: &WordNodeMap,
    d_clip: usize,
    p_clip: usize,
) -> Square<WordRelLabel> {
    let w = wm.len();
    let nodes = wm.nodes();
    let clamp_d = |x: u32| x.min(d_clip as u32);
    let clamp_p = |x: usize| x.min(p_clip) as u32;
    let mut out = Square::filled(w, WordRelLabel::Unreachable);
    for i in 0..w {
        for j in 0..w {
            let label = if i == j {
                WordRelLabel::SelfLoop
            } else if nodes[i].same_occurrence(&nodes[j]) {
                let (oi, oj) = (nodes[i].offset, nodes[j].offset);
                if oj > oi {
                    WordRelLabel::SameFwd(clamp_p(oj - oi))
                } else {
                    WordRelLabel::SameBwd(clamp_p(oi - oj))
                }
            } else {
                match (dist.get(i, j), dist.get(j, i)) {
                    (None, None) => WordRelLabel::Unreachable,
                    (Some(a), None) => WordRelLabel::Fwd(clamp_d(a)),
                    (Some(a), Some(b)) if a <= b => WordRelLabel::Fwd(clamp_d(a)),
                    (_, Some(b)) => WordRelLabel::Bwd(clamp_d(b)),
                }
            };
            out.set(i, j, label);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureMatrices {
    pub rel_e: Square<EntityRelLabel>,
    pub adj: AdjacencyMatrix,
    pub rel_w: Square<WordRelLabel>,
}

impl StructureMatrices {
    /// Builds all three matrices. `wm` must come from linearizing `g`.
    pub fn build(g: &KnowledgeGraph, wm: &WordNodeMap, d_clip: usize, p_clip: usize) -> Self {
        let b = build_bipartite(g);
        let wg = build_word_graph(g, wm);
        StructureMatrices {
            rel_e: rel_pos_entity(&b),
            adj: adjacency(&b),
            rel_w: rel_pos_word(&shortest_paths(&wg), wm, d_clip, p_clip),
        }
    }

    pub fn num_units(&self) -> usize {
        self.rel_e.size
    }
}

/// Expands word-node labels to token resolution as dense label ids: each
/// token inherits its node's labels, and the two tokens of one node are SELF.
pub fn expand_word_labels(
    rel_w: &Square<WordRelLabel>,
    d_clip: usize,
    p_clip: usize,
) -> Square<u16> {
    let n = 2 * rel_w.size;
    let mut out = Square::filled(n, 0u16);
    for a in 0..n {
        for b in 0..n {
            let (i, j) = (a / 2, b / 2);
            let id = if i == j {
                WordRelLabel::SelfLoop.index(d_clip, p_clip)
            } else {
                rel_w.get(i, j).index(d_clip, p_clip)
            };
            out.set(a, b, id as u16);
        }
    }
    out
}

/// Dense label ids for the entity label matrix.
pub fn entity_label_ids(rel_e: &Square<EntityRelLabel>) -> Square<u16> {
    Square {
        size: rel_e.size,
        data: rel_e.data.iter().map(|l| l.index() as u16).collect(),
    }
}

/// Unit kinds in index order; handy for checks and dumps.
pub fn unit_kinds(g: &KnowledgeGraph) -> Vec<UnitKind> {
    (0..g.num_units()).map(|u| g.unit_kind(u)).collect()
}
