//! Turns a raw graph into everything the encoder consumes.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::kg::{cluster_by_head, KnowledgeGraph};
use crate::linearize::{common_prefix, linearize_entity_level, linearize_word_level, EntityLinearization, WordLinearization};
use crate::structure::{entity_label_ids, expand_word_labels, Square, StructureMatrices};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// A clustered, linearized graph with its structure matrices in the dense
/// forms the attention layers index.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    /// The graph both linearizations cover (clustered, common prefix).
    pub graph: KnowledgeGraph,
    pub entity: EntityLinearization,
    pub word: WordLinearization,
    pub matrices: StructureMatrices,
    /// `m × m` entity label ids.
    pub entity_labels: Square<u16>,
    /// `n' × n'` word label ids at token resolution.
    pub word_labels: Square<u16>,
    /// Adjacency as an `m × m` logit bias.
    pub adjacency: Tensor,
}

impl PreparedGraph {
    pub fn entity_len(&self) -> usize {
        self.entity.tokens.len()
    }

    pub fn word_len(&self) -> usize {
        self.word.tokens.len()
    }
}

pub fn prepare_graph(g: &KnowledgeGraph, vocab: &Vocab, cfg: &ModelConfig) -> Result<PreparedGraph> {
    let enc = &cfg.encoder;
    let clustered = if cfg.cluster { cluster_by_head(g) } else { g.clone() };
    // Keep the two streams over the same triples so unit indices agree.
    let graph = clustered.prefix(common_prefix(&clustered, enc.max_input_len)?);
    let entity = linearize_entity_level(&graph, vocab, enc.max_input_len)?;
    let word = linearize_word_level(&graph, vocab, enc.max_input_len)?;
    let matrices = StructureMatrices::build(&graph, &word.words, enc.d_clip, enc.p_clip);
    let entity_labels = entity_label_ids(&matrices.rel_e);
    let word_labels = expand_word_labels(&matrices.rel_w, enc.d_clip, enc.p_clip);
    let m = matrices.adj.size;
    let adjacency = Tensor::from_vec(m, m, matrices.adj.data.iter().map(|&a| a as f64).collect())?;
    Ok(PreparedGraph {
        graph,
        entity,
        word,
        matrices,
        entity_labels,
        word_labels,
        adjacency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::kg::Triple;

    #[test]
    fn streams_cover_the_same_triples() {
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let long = words.join(" ");
        let g = KnowledgeGraph::new(vec![
            Triple::new("a", "b", "c"),
            Triple::new(&long, "r", "x"),
            Triple::new("d", "e", "f"),
        ])
        .unwrap();
        let mut cfg = Profile::Desk.model();
        cfg.encoder.max_input_len = 60;
        let p = prepare_graph(&g, &Vocab::from_words([]), &cfg).unwrap();
        // entity level would keep 2 triples (6 + 45), word level only 1
        assert_eq!(p.graph.triples().len(), 1);
        assert_eq!(p.entity.graph, p.word.graph);
        assert_eq!(p.entity_labels.size, p.graph.num_units());
        assert_eq!(p.word_labels.size, p.word_len());
    }

    #[test]
    fn clustering_is_applied() {
        let g = KnowledgeGraph::new(vec![
            Triple::new("A", "r1", "B"),
            Triple::new("C", "r2", "D"),
            Triple::new("A", "r3", "E"),
        ])
        .unwrap();
        let p = prepare_graph(&g, &Vocab::from_words([]), &Profile::Desk.model()).unwrap();
        assert_eq!(p.graph.triples()[1].relation, "r3");
    }
}
