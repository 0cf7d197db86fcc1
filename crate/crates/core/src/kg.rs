//! Knowledge-graph data model, JSON-Lines corpus ingestion, and head clustering.
//!
//! Units are indexed entities-first, then one relation unit per triple in
//! triple order. Every structure builder in the crate relies on this order.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::RESERVED_TOKENS;

/// One `(head, relation, tail)` edge. Components are trimmed and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Triple {
            head: head.trim().to_string(),
            relation: relation.trim().to_string(),
            tail: tail.trim().to_string(),
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        for (name, part) in [
            ("head", &self.head),
            ("relation", &self.relation),
            ("tail", &self.tail),
        ] {
            let mut words = part.split_whitespace().peekable();
            if words.peek().is_none() {
                return Err(Error::InvalidTriple {
                    index,
                    triple: self.to_string(),
                    message: format!("empty {name}"),
                });
            }
            if let Some(w) = words.find(|w| RESERVED_TOKENS.contains(w)) {
                return Err(Error::InvalidTriple {
                    index,
                    triple: self.to_string(),
                    message: format!("{name} contains reserved token {w}"),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Whether a unit is a (deduplicated) entity or a relation occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Entity,
    Relation,
}

/// Ordered triples plus the derived node sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    entity_nodes: Vec<String>,
    head_entity: Vec<usize>,
    tail_entity: Vec<usize>,
}

impl KnowledgeGraph {
    /// Builds a graph, validating every triple.
    pub fn new(triples: Vec<Triple>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::InvalidExample("graph has no triples".into()));
        }
        let triples: Vec<Triple> = triples
            .into_iter()
            .map(|t| Triple::new(&t.head, &t.relation, &t.tail))
            .collect();
        for (i, t) in triples.iter().enumerate() {
            t.validate(i)?;
        }
        Ok(Self::index(triples))
    }

    fn index(triples: Vec<Triple>) -> Self {
        let mut entity_nodes = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut intern = |label: &str| -> usize {
            if let Some(&i) = seen.get(label) {
                return i;
            }
            entity_nodes.push(label.to_string());
            seen.insert(label.to_string(), entity_nodes.len() - 1);
            entity_nodes.len() - 1
        };
        let mut head_entity = Vec::with_capacity(triples.len());
        let mut tail_entity = Vec::with_capacity(triples.len());
        for t in &triples {
            head_entity.push(intern(&t.head));
            tail_entity.push(intern(&t.tail));
        }
        KnowledgeGraph {
            triples,
            entity_nodes,
            head_entity,
            tail_entity,
        }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Distinct entity labels in first-appearance order.
    pub fn entity_nodes(&self) -> &[String] {
        &self.entity_nodes
    }

    pub fn num_entities(&self) -> usize {
        self.entity_nodes.len()
    }

    /// One relation node per triple occurrence.
    pub fn num_relations(&self) -> usize {
        self.triples.len()
    }

    /// Total unit count `m`.
    pub fn num_units(&self) -> usize {
        self.num_entities() + self.num_relations()
    }

    pub fn head_unit(&self, triple: usize) -> usize {
        self.head_entity[triple]
    }

    pub fn tail_unit(&self, triple: usize) -> usize {
        self.tail_entity[triple]
    }

    pub fn relation_unit(&self, triple: usize) -> usize {
        self.num_entities() + triple
    }

    pub fn unit_kind(&self, unit: usize) -> UnitKind {
        if unit < self.num_entities() {
            UnitKind::Entity
        } else {
            UnitKind::Relation
        }
    }

    /// Surface label of a unit.
    pub fn unit_label(&self, unit: usize) -> &str {
        match self.unit_kind(unit) {
            UnitKind::Entity => &self.entity_nodes[unit],
            UnitKind::Relation => &self.triples[unit - self.num_entities()].relation,
        }
    }

    /// The graph restricted to its first `count` triples.
    pub fn prefix(&self, count: usize) -> KnowledgeGraph {
        Self::index(self.triples[..count.min(self.triples.len())].to_vec())
    }
}

/// Groups triples by head label, heads in first-appearance order, stable
/// within a group.
pub fn cluster_by_head(g: &KnowledgeGraph) -> KnowledgeGraph {
    let mut order: Vec<usize> = (0..g.triples.len()).collect();
    // head_entity ids are assigned in first-appearance order of any role, so
    // rank heads by the position of their first occurrence as a head.
    let mut head_rank: HashMap<usize, usize> = HashMap::new();
    for &h in &g.head_entity {
        let next = head_rank.len();
        head_rank.entry(h).or_insert(next);
    }
    order.sort_by_key(|&i| head_rank[&g.head_entity[i]]);
    KnowledgeGraph::index(order.into_iter().map(|i| g.triples[i].clone()).collect())
}

/// A graph paired with its reference texts.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub graph: KnowledgeGraph,
    pub references: Vec<String>,
}

impl Example {
    pub fn new(graph: KnowledgeGraph, references: Vec<String>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::InvalidExample("no reference text".into()));
        }
        if references.iter().any(|r| r.trim().is_empty()) {
            return Err(Error::InvalidExample("empty reference text".into()));
        }
        Ok(Example { graph, references })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub split: Split,
}

/// Wire form of one corpus line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub triples: Vec<[String; 3]>,
    pub text: Vec<String>,
}

impl ExampleRecord {
    pub fn from_example(ex: &Example) -> Self {
        ExampleRecord {
            triples: ex
                .graph
                .triples()
                .iter()
                .map(|t| [t.head.clone(), t.relation.clone(), t.tail.clone()])
                .collect(),
            text: ex.references.clone(),
        }
    }

    pub fn into_example(self) -> Result<Example> {
        let triples = self
            .triples
            .into_iter()
            .map(|[h, r, t]| Triple::new(&h, &r, &t))
            .collect();
        Example::new(KnowledgeGraph::new(triples)?, self.text)
    }
}

/// Parses one JSON-Lines record (1-based `line` for diagnostics).
pub fn parse_line(text: &str, line: usize) -> Result<Example> {
    let record: ExampleRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    record.into_example().map_err(|e| match e {
        Error::InvalidTriple {
            index,
            triple,
            message,
        } => Error::InvalidTriple {
            index,
            triple,
            message: format!("{message} (line {line})"),
        },
        Error::InvalidExample(m) => Error::InvalidExample(format!("{m} (line {line})")),
        other => other,
    })
}

/// Reads a JSON-Lines corpus. Blank lines are skipped.
pub fn parse_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_line(&line, i + 1)?);
    }
    Ok(Corpus { examples, split })
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for ex in &corpus.examples {
        let line = serde_json::to_string(&ExampleRecord::from_example(ex))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(ts: &[(&str, &str, &str)]) -> KnowledgeGraph {
        KnowledgeGraph::new(ts.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect()).unwrap()
    }

    /// Stable grouping by brute force: repeatedly pull out every triple whose
    /// head matches the earliest remaining head.
    fn cluster_oracle(ts: &[Triple]) -> Vec<Triple> {
        let mut rest: Vec<Triple> = ts.to_vec();
        let mut out = Vec::new();
        while !rest.is_empty() {
            let head = rest[0].head.clone();
            let (same, other): (Vec<_>, Vec<_>) = rest.into_iter().partition(|t| t.head == head);
            out.extend(same);
            rest = other;
        }
        out
    }

    #[test]
    fn acharya_line_parses() {
        let ex = parse_line(
            r#"{"triples": [["Acharya Institute of Technology","country","India"]], "text": ["..."]}"#,
            1,
        )
        .unwrap();
        assert_eq!(ex.graph.triples().len(), 1);
        assert_eq!(
            ex.graph.entity_nodes(),
            &["Acharya Institute of Technology".to_string(), "India".to_string()]
        );
        assert_eq!(ex.graph.num_relations(), 1);
    }

    #[test]
    fn relation_nodes_are_per_occurrence() {
        let graph = g(&[("A", "r1", "B"), ("A", "r1", "C")]);
        assert_eq!(graph.num_relations(), 2);
        assert_eq!(graph.num_entities(), 3);
        assert_eq!(graph.num_units(), 5);
        assert_eq!(graph.relation_unit(1), 4);
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        let c = parse_corpus(&p, Split::Test).unwrap();
        assert!(c.examples.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            "{\"triples\": [[\"a\",\"b\",\"c\"]], \"text\": [\"x\"]}\n{not json\n",
        )
        .unwrap();
        match parse_corpus(&p, Split::Train) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_component_is_rejected() {
        let err = parse_line(r#"{"triples": [["a","b","c"],["a","  ","c"]], "text": ["x"]}"#, 3)
            .unwrap_err();
        match err {
            Error::InvalidTriple { index, message, .. } => {
                assert_eq!(index, 1);
                assert!(message.contains("relation"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_reference_is_rejected() {
        assert!(parse_line(r#"{"triples": [["a","b","c"]], "text": []}"#, 1).is_err());
    }

    #[test]
    fn entity_labels_are_trimmed() {
        let graph = g(&[(" A ", "r", "B"), ("A", "s", "B ")]);
        assert_eq!(graph.num_entities(), 2);
    }

    #[test]
    fn cluster_example() {
        let graph = g(&[("A", "r1", "B"), ("C", "r2", "D"), ("A", "r3", "E")]);
        let c = cluster_by_head(&graph);
        let want = g(&[("A", "r1", "B"), ("A", "r3", "E"), ("C", "r2", "D")]);
        assert_eq!(c, want);
        assert_eq!(c.triples(), cluster_oracle(graph.triples()).as_slice());
    }

    #[test]
    fn cluster_fixed_points() {
        let one = g(&[("A", "r", "B")]);
        assert_eq!(cluster_by_head(&one), one);
        let done = g(&[("A", "r", "B"), ("A", "s", "C"), ("B", "t", "A")]);
        assert_eq!(cluster_by_head(&done), done);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_graph() -> impl Strategy<Value = KnowledgeGraph> {
            prop::collection::vec((0..4usize, 0..3usize, 0..4usize), 1..8).prop_map(|ts| {
                KnowledgeGraph::new(
                    ts.into_iter()
                        .map(|(h, r, t)| {
                            Triple::new(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"))
                        })
                        .collect(),
                )
                .unwrap()
            })
        }

        proptest! {
            #[test]
            fn cluster_matches_oracle_and_is_idempotent(graph in arb_graph()) {
                let once = cluster_by_head(&graph);
                let want = cluster_oracle(graph.triples());
                prop_assert_eq!(once.triples(), want.as_slice());
                prop_assert_eq!(cluster_by_head(&once), once.clone());
                let mut a: Vec<String> = graph.triples().iter().map(|t| t.to_string()).collect();
                let mut b: Vec<String> = once.triples().iter().map(|t| t.to_string()).collect();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn indexing_is_deterministic(graph in arb_graph()) {
                let again = KnowledgeGraph::new(graph.triples().to_vec()).unwrap();
                prop_assert_eq!(again.entity_nodes(), graph.entity_nodes());
                let mut uniq: Vec<&String> = graph.entity_nodes().iter().collect();
                uniq.sort();
                uniq.dedup();
                prop_assert_eq!(uniq.len(), graph.num_entities());
            }
        }
    }
}
