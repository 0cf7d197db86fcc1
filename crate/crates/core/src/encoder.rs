//! The multi-granularity encoder.
//!
//! Two parallel stacks read the two linearizations:
//!
//! ```text
//! entity tokens ─ emb+pos ─┬─ [ linear attn → pool → structure attn (A + γ(Rᴱ)) → gather + residual → FF ] × L ─┐
//!                          │                                                                                   ├─ aggregate → O
//! word tokens ─── emb+pos ─┴─ [ structure attn (γ(Rᴺ)) → FF ] × L ──────────────────────── × λ ──────────────────┘
//! ```
//!
//! Aggregation concatenates both streams along the sequence axis, runs one
//! self-attention over the result and finishes with
//! `O = LN(FF(Xᶜ + c) + Xᶜ)`.

use rand_chacha::ChaCha8Rng;

use crate::config::EncoderConfig;
use crate::error::Result;
use crate::layers::{AttnBias, AttnTrace, Dropout, FeedForward, LayerNorm, MultiHeadAttention};
use crate::linearize::SpanMap;
use crate::pipeline::PreparedGraph;
use crate::structure::{EntityRelLabel, Square, WordRelLabel};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct EntityLayer {
    pub linear_attn: MultiHeadAttention,
    pub structure_attn: MultiHeadAttention,
    /// `EntityRelLabel::COUNT × heads`, zero-initialized.
    pub label_bias: ParamId,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct WordLayer {
    pub attn: MultiHeadAttention,
    /// `WordRelLabel::count × heads`, zero-initialized.
    pub label_bias: ParamId,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Aggregation {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub entity_pos: ParamId,
    pub word_pos: ParamId,
    pub entity_layers: Vec<EntityLayer>,
    pub word_layers: Vec<WordLayer>,
    pub aggregation: Aggregation,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let h = cfg.n_heads;
        let scale = crate::layers::INIT_SCALE;
        let entity_pos = store.add_uniform("enc.entity_pos", cfg.max_input_len, d, scale, rng);
        let word_pos = store.add_uniform("enc.word_pos", cfg.max_input_len, d, scale, rng);
        let entity_layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("enc.entity.{l}");
                EntityLayer {
                    linear_attn: MultiHeadAttention::new(store, &format!("{p}.linear_attn"), d, h, rng),
                    structure_attn: MultiHeadAttention::new(store, &format!("{p}.structure_attn"), d, h, rng),
                    label_bias: store.add(format!("{p}.label_bias"), Tensor::zeros(EntityRelLabel::COUNT, h)),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        let word_layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("enc.word.{l}");
                WordLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, h, rng),
                    label_bias: store.add(
                        format!("{p}.label_bias"),
                        Tensor::zeros(WordRelLabel::count(cfg.d_clip, cfg.p_clip), h),
                    ),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        let aggregation = Aggregation {
            attn: MultiHeadAttention::new(store, "enc.agg.attn", d, h, rng),
            ff: FeedForward::new(store, "enc.agg.ff", d, rng),
            norm: LayerNorm::new(store, "enc.agg.norm", d),
        };
        EncoderParams {
            entity_pos,
            word_pos,
            entity_layers,
            word_layers,
            aggregation,
        }
    }
}

/// Plain multi-head self-attention over the entity-level sequence.
pub fn linear_attention(t: &mut Tape, attn: &MultiHeadAttention, x: Var) -> Result<Var> {
    Ok(attn.forward(t, x, x, &AttnBias::default())?.0)
}

/// Mean of each unit's token rows.
pub fn pool_units(t: &mut Tape, x_lin: Var, spans: &SpanMap) -> Result<Var> {
    t.mean_pool_spans(x_lin, spans.units(), spans.num_units())
}

/// Per-head label biases `γ_h(R)` read from a `labels × heads` table.
fn label_biases(t: &mut Tape, table: ParamId, labels: &Square<u16>, heads: usize) -> Result<Vec<Var>> {
    let tv = t.param(table);
    (0..heads)
        .map(|h| t.label_bias(tv, &labels.data, labels.size, h))
        .collect()
}

/// Attention over units with the adjacency and label biases added to the
/// logits. `None` leaves a term out.
pub fn entity_structure_attention(
    t: &mut Tape,
    attn: &MultiHeadAttention,
    x_p: Var,
    adjacency: Option<&Tensor>,
    labels: Option<(ParamId, &Square<u16>)>,
) -> Result<(Var, AttnTrace)> {
    let shared = adjacency.map(|a| t.constant(a.clone()));
    let per_head = match labels {
        Some((table, l)) => label_biases(t, table, l, attn.heads)?,
        None => Vec::new(),
    };
    attn.forward(t, x_p, x_p, &AttnBias { shared, per_head })
}

/// Attention over word-level tokens with label biases added to the logits.
pub fn word_structure_attention(
    t: &mut Tape,
    attn: &MultiHeadAttention,
    x: Var,
    labels: Option<(ParamId, &Square<u16>)>,
) -> Result<(Var, AttnTrace)> {
    let per_head = match labels {
        Some((table, l)) => label_biases(t, table, l, attn.heads)?,
        None => Vec::new(),
    };
    attn.forward(t, x, x, &AttnBias { shared: None, per_head })
}

#[derive(Debug, Clone)]
pub struct EntityLayerOutput {
    /// `gather(X_g) + X_lin`, before the residual feed-forward sublayer.
    pub fused: Var,
    pub linear: Var,
    pub structure: AttnTrace,
    pub output: Var,
}

impl EntityLayer {
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        prep: &PreparedGraph,
        cfg: &EncoderConfig,
        drop: &mut Dropout,
    ) -> Result<EntityLayerOutput> {
        let x_lin = linear_attention(t, &self.linear_attn, x)?;
        let x_p = pool_units(t, x_lin, &prep.entity.spans)?;
        let adjacency = cfg.ablation.adjacency.then_some(&prep.adjacency);
        let labels = cfg
            .ablation
            .entity_bias
            .then_some((self.label_bias, &prep.entity_labels));
        let (x_g, trace) = entity_structure_attention(t, &self.structure_attn, x_p, adjacency, labels)?;
        let gathered = t.gather_units(x_g, prep.entity.spans.units())?;
        let fused = t.add(gathered, x_lin)?;
        let output = residual_block(t, x, fused, &self.norm1, &self.ff, &self.norm2, drop)?;
        Ok(EntityLayerOutput {
            fused,
            linear: x_lin,
            structure: trace,
            output,
        })
    }
}

impl WordLayer {
    pub fn forward(
        &self,
        t: &mut Tape,
        x: Var,
        prep: &PreparedGraph,
        cfg: &EncoderConfig,
        drop: &mut Dropout,
    ) -> Result<(Var, AttnTrace)> {
        let labels = cfg.ablation.word_bias.then_some((self.label_bias, &prep.word_labels));
        let (x_w, trace) = word_structure_attention(t, &self.attn, x, labels)?;
        let out = residual_block(t, x, x_w, &self.norm1, &self.ff, &self.norm2, drop)?;
        Ok((out, trace))
    }
}

/// `LN2(h + FF(h))` with `h = LN1(x + sub)`.
fn residual_block(
    t: &mut Tape,
    x: Var,
    sub: Var,
    norm1: &LayerNorm,
    ff: &FeedForward,
    norm2: &LayerNorm,
    drop: &mut Dropout,
) -> Result<Var> {
    let sub = drop.apply(t, sub)?;
    let h = t.add(x, sub)?;
    let h = norm1.forward(t, h)?;
    let f = ff.forward(t, h)?;
    let f = drop.apply(t, f)?;
    let h2 = t.add(h, f)?;
    norm2.forward(t, h2)
}

/// Sequence-axis fusion of both streams: `c = [X̃ᴱ ∥ λXᵂ]`,
/// `Xᶜ = attn(c)`, `O = LN(FF(Xᶜ + c) + Xᶜ)`.
pub fn aggregate(t: &mut Tape, agg: &Aggregation, x_e: Var, x_w: Var, lambda: f64) -> Result<Var> {
    let scaled = t.scale(x_w, lambda);
    let c = t.concat_rows(&[x_e, scaled])?;
    let (x_c, _) = agg.attn.forward(t, c, c, &AttnBias::default())?;
    let s = t.add(x_c, c)?;
    let f = agg.ff.forward(t, s)?;
    let r = t.add(f, x_c)?;
    agg.norm.forward(t, r)
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `(n + n') × d_model`
    pub output: Var,
    /// Rows `0..boundary` come from the entity-level stream.
    pub boundary: usize,
}

fn embed(t: &mut Tape, tok_emb: ParamId, pos: ParamId, ids: &[u32]) -> Result<Var> {
    let table = t.param(tok_emb);
    let e = t.embedding(table, ids)?;
    let pos_table = t.param(pos);
    let positions: Vec<u32> = (0..ids.len() as u32).collect();
    let p = t.embedding(pos_table, &positions)?;
    t.add(e, p)
}

/// Runs both stacks and the aggregation.
pub fn encode(
    t: &mut Tape,
    params: &EncoderParams,
    tok_emb: ParamId,
    prep: &PreparedGraph,
    cfg: &EncoderConfig,
    drop: &mut Dropout,
) -> Result<EncoderOutput> {
    let x = embed(t, tok_emb, params.entity_pos, &prep.entity.tokens)?;
    let mut x_e = drop.apply(t, x)?;
    for layer in &params.entity_layers {
        x_e = layer.forward(t, x_e, prep, cfg, drop)?.output;
    }
    let (x_w, lambda) = if cfg.ablation.word_module {
        let x = embed(t, tok_emb, params.word_pos, &prep.word.tokens)?;
        let mut x_w = drop.apply(t, x)?;
        for layer in &params.word_layers {
            x_w = layer.forward(t, x_w, prep, cfg, drop)?.0;
        }
        (x_w, cfg.lambda)
    } else {
        let zeros = t.constant(Tensor::zeros(prep.word_len(), cfg.d_model));
        (zeros, 0.0)
    };
    let output = aggregate(t, &params.aggregation, x_e, x_w, lambda)?;
    Ok(EncoderOutput {
        output,
        boundary: prep.entity_len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::kg::{KnowledgeGraph, Triple};
    use crate::pipeline::prepare_graph;
    use crate::vocab::Vocab;
    use rand::SeedableRng;

    fn setup(triples: &[(&str, &str, &str)]) -> (ParamStore, EncoderParams, ParamId, PreparedGraph, EncoderConfig) {
        let g = KnowledgeGraph::new(triples.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect()).unwrap();
        let words: Vec<&str> = triples
            .iter()
            .flat_map(|(h, r, t)| h.split_whitespace().chain(r.split_whitespace()).chain(t.split_whitespace()))
            .collect();
        let vocab = Vocab::from_words(words);
        let mcfg = Profile::Desk.model();
        let prep = prepare_graph(&g, &vocab, &mcfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tok = store.add_uniform("tok", vocab.len(), mcfg.encoder.d_model, 0.08, &mut rng);
        let enc = EncoderParams::new(&mut store, &mcfg.encoder, &mut rng);
        (store, enc, tok, prep, mcfg.encoder)
    }

    fn random_input(t: &mut Tape, rows: usize, d: usize, seed: u64) -> Var {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t.constant(Tensor::from_vec(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
    }

    #[test]
    fn single_unit_returns_value_row_regardless_of_bias() {
        let (mut store, enc, ..) = setup(&[("A", "r", "B")]);
        let layer = enc.entity_layers[0].clone();
        store.value_mut(layer.label_bias).fill(3.0);
        let mut t = Tape::new(&store);
        let x_p = random_input(&mut t, 1, 32, 1);
        let labels = Square { size: 1, data: vec![EntityRelLabel::SelfLoop.index() as u16] };
        let adj = Tensor::from_vec(1, 1, vec![1.0]).unwrap();
        let (y, _) =
            entity_structure_attention(&mut t, &layer.structure_attn, x_p, Some(&adj), Some((layer.label_bias, &labels))).unwrap();
        let v = layer.structure_attn.v.forward(&mut t, x_p).unwrap();
        let want = layer.structure_attn.o.forward(&mut t, v).unwrap();
        assert_eq!(t.value(y), t.value(want));
    }

    #[test]
    fn zero_biases_degenerate_to_linear_attention() {
        let (store, enc, _, prep, _) = setup(&[("A", "r", "B"), ("B", "s", "C")]);
        let layer = &enc.entity_layers[0];
        let m = prep.graph.num_units();
        let mut t = Tape::new(&store);
        let x_p = random_input(&mut t, m, 32, 2);
        let zero_adj = Tensor::zeros(m, m);
        let (a, _) = entity_structure_attention(
            &mut t,
            &layer.structure_attn,
            x_p,
            Some(&zero_adj),
            Some((layer.label_bias, &prep.entity_labels)),
        )
        .unwrap();
        let b = linear_attention(&mut t, &layer.structure_attn, x_p).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn logits_match_hand_computation() {
        // (A, r, B): units A=0, B=1, r=2
        let (mut store, enc, _, prep, _) = setup(&[("A", "r", "B")]);
        let layer = enc.entity_layers[0].clone();
        let ent_rel = EntityRelLabel::EntRel.index();
        store.value_mut(layer.label_bias).set(ent_rel, 1, 0.75);
        let mut t = Tape::new(&store);
        let x_p = random_input(&mut t, 3, 32, 3);
        let (_, trace) = entity_structure_attention(
            &mut t,
            &layer.structure_attn,
            x_p,
            Some(&prep.adjacency),
            Some((layer.label_bias, &prep.entity_labels)),
        )
        .unwrap();
        let q = layer.structure_attn.q.forward(&mut t, x_p).unwrap();
        let k = layer.structure_attn.k.forward(&mut t, x_p).unwrap();
        let (qv, kv) = (t.value(q).clone(), t.value(k).clone());
        let dh = 16;
        for h in 0..2 {
            let logits = t.value(trace.logits[h]);
            for i in 0..3 {
                for j in 0..3 {
                    let qk: f64 = (0..dh).map(|c| qv.get(i, h * dh + c) * kv.get(j, h * dh + c)).sum();
                    let adj = prep.matrices.adj.get(i, j) as f64;
                    let gamma = if h == 1 && prep.matrices.rel_e.get(i, j) == EntityRelLabel::EntRel { 0.75 } else { 0.0 };
                    let want = qk / 4.0 + adj + gamma;
                    assert!((logits.get(i, j) - want).abs() < 1e-12, "h{h} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn zero_structure_values_leave_linear_output() {
        let (mut store, enc, tok, prep, cfg) = setup(&[("New York", "in", "USA"), ("USA", "has", "New York")]);
        let layer = enc.entity_layers[0].clone();
        for lin in [layer.structure_attn.v, layer.structure_attn.o] {
            store.value_mut(lin.w).fill(0.0);
            if let Some(b) = lin.b {
                store.value_mut(b).fill(0.0);
            }
        }
        let mut t = Tape::new(&store);
        let x = embed(&mut t, tok, enc.entity_pos, &prep.entity.tokens).unwrap();
        let out = layer.forward(&mut t, x, &prep, &cfg, &mut Dropout::disabled()).unwrap();
        assert_eq!(t.value(out.fused), t.value(out.linear));
    }

    #[test]
    fn marker_rows_carry_linear_attention_exactly() {
        let (store, enc, tok, prep, cfg) = setup(&[("A b", "r", "C"), ("C", "s", "A b")]);
        let layer = &enc.entity_layers[0];
        let mut t = Tape::new(&store);
        let x = embed(&mut t, tok, enc.entity_pos, &prep.entity.tokens).unwrap();
        let out = layer.forward(&mut t, x, &prep, &cfg, &mut Dropout::disabled()).unwrap();
        for (i, u) in prep.entity.spans.units().iter().enumerate() {
            if u.is_none() {
                assert_eq!(t.value(out.fused).row(i), t.value(out.linear).row(i));
            }
        }
    }

    #[test]
    fn unreachable_bias_confines_word_attention() {
        let (mut store, enc, tok, prep, cfg) = setup(&[("A b", "r", "C"), ("D", "s", "E f")]);
        let layer = enc.word_layers[0].clone();
        // everything that is not SELF or SAME_* is pushed far down
        let rows = WordRelLabel::count(cfg.d_clip, cfg.p_clip);
        for l in 0..rows {
            let same = l == 0 || l > 2 * cfg.d_clip && l < rows - 1;
            if !same {
                for h in 0..cfg.n_heads {
                    store.value_mut(layer.label_bias).set(l, h, -1e4);
                }
            }
        }
        let mut t = Tape::new(&store);
        let x = embed(&mut t, tok, enc.word_pos, &prep.word.tokens).unwrap();
        let (_, trace) =
            word_structure_attention(&mut t, &layer.attn, x, Some((layer.label_bias, &prep.word_labels))).unwrap();
        let nodes = prep.word.words.nodes();
        for p in &trace.probs {
            let pv = t.value(*p);
            for a in 0..pv.rows() {
                let off: f64 = (0..pv.cols())
                    .filter(|&b| !(a / 2 == b / 2 || nodes[a / 2].same_occurrence(&nodes[b / 2])))
                    .map(|b| pv.get(a, b))
                    .sum();
                assert!(off < 1e-3, "row {a}: {off}");
                let s: f64 = pv.row(a).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_word_bias_equals_plain_attention() {
        let (store, enc, tok, prep, _) = setup(&[("A b", "r", "C")]);
        let layer = &enc.word_layers[0];
        let mut t = Tape::new(&store);
        let x = embed(&mut t, tok, enc.word_pos, &prep.word.tokens).unwrap();
        let (a, _) = word_structure_attention(&mut t, &layer.attn, x, Some((layer.label_bias, &prep.word_labels))).unwrap();
        let (b, _) = word_structure_attention(&mut t, &layer.attn, x, None).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn two_token_word_stream_normalizes() {
        let (store, enc, tok, _, cfg) = setup(&[("A", "r", "B")]);
        let layer = &enc.word_layers[0];
        let mut t = Tape::new(&store);
        let x = embed(&mut t, tok, enc.word_pos, &[3, 8]).unwrap();
        let labels = Square { size: 2, data: vec![0; 4] };
        let (_, trace) = word_structure_attention(&mut t, &layer.attn, x, Some((layer.label_bias, &labels))).unwrap();
        assert_eq!(trace.probs.len(), cfg.n_heads);
        for p in trace.probs {
            for r in 0..2 {
                assert!((t.value(p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_shape_and_lambda_sensitivity() {
        let (store, enc, ..) = setup(&[("A", "r", "B")]);
        let mut t = Tape::new(&store);
        let xe = random_input(&mut t, 6, 32, 7);
        let xw = random_input(&mut t, 6, 32, 8);
        let half = aggregate(&mut t, &enc.aggregation, xe, xw, 0.5).unwrap();
        let full = aggregate(&mut t, &enc.aggregation, xe, xw, 1.0).unwrap();
        assert_eq!(t.value(half).shape(), (12, 32));
        assert_ne!(t.value(half), t.value(full));
        // λ = 0: word content is irrelevant
        let other = random_input(&mut t, 6, 32, 9);
        let a = aggregate(&mut t, &enc.aggregation, xe, xw, 0.0).unwrap();
        let b = aggregate(&mut t, &enc.aggregation, xe, other, 0.0).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn encode_shape_law_and_determinism() {
        let (store, enc, tok, prep, cfg) = setup(&[
            ("Acharya Institute of Technology", "affiliation", "Visvesvaraya Technological University"),
            ("Acharya Institute of Technology", "country", "India"),
            ("Acharya Institute of Technology", "campus", "In Soldevanahalli, Acharya Dr. Sarvapalli Radhakrishnan Road, Hessarghatta Main Road, Bangalore – 560090."),
            ("Visvesvaraya Technological University", "city", "Belgaum"),
        ]);
        let run = || {
            let mut t = Tape::new(&store);
            let o = encode(&mut t, &enc, tok, &prep, &cfg, &mut Dropout::disabled()).unwrap();
            (t.value(o.output).clone(), o.boundary)
        };
        let (o1, b1) = run();
        let (o2, _) = run();
        assert_eq!(o1.shape(), (prep.entity_len() + prep.word_len(), 32));
        assert_eq!(b1, prep.entity_len());
        assert!(o1.all_finite());
        assert_eq!(o1, o2);
    }
}
