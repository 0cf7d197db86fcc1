//! Small generated corpora for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{Example, KnowledgeGraph, Triple};

fn example(triples: &[(&str, &str, &str)], text: &str) -> Example {
    let g = KnowledgeGraph::new(triples.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect())
        .expect("static triples are valid");
    Example::new(g, vec![text.to_string()]).expect("static text is non-empty")
}

/// Sixteen fixed examples with one to three triples each, for overfitting runs.
pub fn toy_corpus() -> Vec<Example> {
    vec![
        example(&[("alice", "likes", "bob")], "alice likes bob"),
        example(&[("bob", "likes", "carol")], "bob likes carol"),
        example(&[("carol", "knows", "dave")], "carol knows dave"),
        example(&[("dave", "lives in", "paris")], "dave lives in paris"),
        example(&[("erin", "works at", "acme")], "erin works at acme"),
        example(&[("acme", "based in", "rome")], "acme is based in rome"),
        example(
            &[("alice", "lives in", "rome"), ("alice", "works at", "globex")],
            "alice lives in rome and works at globex",
        ),
        example(
            &[("bob", "knows", "erin"), ("erin", "lives in", "oslo")],
            "bob knows erin who lives in oslo",
        ),
        example(
            &[("globex", "based in", "oslo"), ("frank", "works at", "globex")],
            "frank works at globex , which is based in oslo",
        ),
        example(&[("frank", "likes", "alice")], "frank likes alice"),
        example(
            &[("carol", "works at", "initech"), ("initech", "based in", "paris")],
            "carol works at initech in paris",
        ),
        example(
            &[("dave", "knows", "frank"), ("frank", "lives in", "rome"), ("dave", "lives in", "oslo")],
            "dave lives in oslo and knows frank , who lives in rome",
        ),
        example(&[("erin", "likes", "dave")], "erin likes dave"),
        example(
            &[("bob", "works at", "acme"), ("bob", "lives in", "paris")],
            "bob works at acme and lives in paris",
        ),
        example(
            &[("grace", "knows", "alice"), ("grace", "works at", "initech"), ("initech", "based in", "rome")],
            "grace knows alice and works at initech , based in rome",
        ),
        example(&[("grace", "likes", "erin")], "the one grace likes is erin"),
    ]
}

const NAMES: [&str; 16] = [
    "ann", "ben", "cal", "dia", "eli", "fay", "gus", "hal", "ivy", "joe", "kim", "lou", "max", "ned", "ola", "pam",
];
const SURNAMES: [&str; 4] = ["smith", "jones", "brown", "lee"];

/// Relation the text is about; the sentence names its tail first.
const TARGET: (&str, &str) = ("owns", "is owned by");
const DISTRACTORS: [&str; 4] = ["likes", "teaches", "hires", "knows"];

/// Parameters of the direction-sensitive task: every graph holds one target
/// triple among distractors, in random order, and the text names the target
/// pair in a fixed role order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionTask {
    pub train: usize,
    pub test: usize,
    /// Distractor triples per graph, inclusive range.
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Chance, in percent, that an entity gets a surname.
    pub surname_percent: u32,
}

impl Default for DirectionTask {
    fn default() -> Self {
        DirectionTask {
            train: 200,
            test: 50,
            min_distractors: 0,
            max_distractors: 3,
            surname_percent: 30,
        }
    }
}

impl DirectionTask {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Example {
        let k = 1 + rng.gen_range(self.min_distractors..=self.max_distractors);
        let mut names: Vec<&str> = NAMES.to_vec();
        names.shuffle(rng);
        let mut entity = |i: usize| {
            if rng.gen_range(0..100) < self.surname_percent {
                format!("{} {}", names[i], SURNAMES.choose(rng).unwrap())
            } else {
                names[i].to_string()
            }
        };
        let mut triples: Vec<Triple> = (0..k)
            .map(|i| {
                let rel = if i == 0 { TARGET.0 } else { DISTRACTORS[(i - 1) % DISTRACTORS.len()] };
                Triple::new(&entity(2 * i), rel, &entity(2 * i + 1))
            })
            .collect();
        let text = format!("{} {} {}", triples[0].tail, TARGET.1, triples[0].head);
        triples.shuffle(rng);
        let g = KnowledgeGraph::new(triples).expect("generated triples are valid");
        Example::new(g, vec![text]).expect("generated text is non-empty")
    }

    /// `(train, held_out)` with no graph shared between the two.
    pub fn generate(&self, seed: u64) -> (Vec<Example>, Vec<Example>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(self.train + self.test);
        while out.len() < self.train + self.test {
            let ex = self.draw(&mut rng);
            if seen.insert(format!("{:?}", ex.graph.triples())) {
                out.push(ex);
            }
        }
        let test = out.split_off(self.train);
        (out, test)
    }
}

/// Fraction of `outputs` equal to the first reference of each example.
pub fn exact_match(outputs: &[String], examples: &[Example]) -> f64 {
    let hits = outputs
        .iter()
        .zip(examples)
        .filter(|(o, ex)| ex.references.iter().any(|r| r == *o))
        .count();
    hits as f64 / examples.len().max(1) as f64
}
