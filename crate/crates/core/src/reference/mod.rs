//! A second, forward-only implementation of the model's teacher-forced loss,
//! generic over the scalar type. It shares no code with the tape: in f64 it
//! is an independent oracle for the forward pass, and in double-double it is
//! the numeric side of the gradient check, where f64 rounding in the loss
//! would otherwise swamp the difference quotient.

mod dd;

pub use dd::{DoubleDouble, Real};

use crate::encoder::{Aggregation, EntityLayer, WordLayer};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::model::{DecoderLayer, Model};
use crate::pipeline::PreparedGraph;
use crate::structure::Square;
use crate::tensor::{ParamId, ParamStore, Tensor, LAYER_NORM_EPS};
use crate::vocab;

#[derive(Debug, Clone)]
struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.data[i * self.cols + j]
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn add(&self, o: &Mat<T>) -> Self {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    /// `self · w` for an f64 right operand.
    fn matmul_f64(&self, w: &Tensor) -> Self {
        assert_eq!(self.cols, w.rows());
        let n = w.cols();
        let mut out = Mat::zeros(self.rows, n);
        let mut acc = vec![[0.0; 2]; n];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = [0.0; 2]);
            for k in 0..self.cols {
                let a = self.at(i, k);
                T::mac_row(&mut acc, a, &w.data()[k * n..(k + 1) * n]);
            }
            for (o, a) in out.data[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = T::from_acc(*a);
            }
        }
        out
    }
}

/// Parameter values from a store, converted to `T`.
struct Params<'a> {
    store: &'a ParamStore,
}

impl Params<'_> {
    fn get(&self, id: ParamId) -> &Tensor {
        self.store.value(id)
    }

    fn linear<T: Real>(&self, l: &Linear, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul_f64(self.get(l.w));
        if let Some(b) = l.b {
            let b = self.get(b).data();
            for row in y.data.chunks_mut(y.cols) {
                for (v, &b) in row.iter_mut().zip(b) {
                    *v = *v + T::from_f64(b);
                }
            }
        }
        y
    }

    fn layer_norm<T: Real>(&self, ln: &LayerNorm, x: &Mat<T>) -> Mat<T> {
        let (g, b) = (self.get(ln.gain).data(), self.get(ln.bias).data());
        let n = T::from_f64(x.cols as f64);
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = &x.data[i * x.cols..(i + 1) * x.cols];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let sd = (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
            for j in 0..x.cols {
                *out.at_mut(i, j) = ((row[j] - mean) / sd).mul_f64(g[j]) + T::from_f64(b[j]);
            }
        }
        out
    }

    fn feed_forward<T: Real>(&self, ff: &FeedForward, x: &Mat<T>) -> Mat<T> {
        let h = self.linear(&ff.up, x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.linear(&ff.down, &h)
    }

    /// `bias(h, i, j)` returns the additive logit term, `None` for a masked
    /// position.
    fn attention<T: Real>(
        &self,
        a: &MultiHeadAttention,
        query: &Mat<T>,
        memory: &Mat<T>,
        bias: impl Fn(usize, usize, usize) -> Option<T>,
    ) -> Mat<T> {
        let q = self.linear(&a.q, query);
        let k = self.linear(&a.k, memory);
        let v = self.linear(&a.v, memory);
        let dh = q.cols / a.heads;
        let scale = T::from_f64(1.0) / T::from_f64(dh as f64).sqrt();
        let mut cat = Mat::zeros(query.rows, q.cols);
        for h in 0..a.heads {
            for i in 0..query.rows {
                let logits: Vec<Option<T>> = (0..memory.rows)
                    .map(|j| {
                        bias(h, i, j).map(|b| {
                            let dot = (0..dh).fold(T::zero(), |s, c| s + q.at(i, h * dh + c) * k.at(j, h * dh + c));
                            dot * scale + b
                        })
                    })
                    .collect();
                let max = logits
                    .iter()
                    .flatten()
                    .copied()
                    .fold(None, |m: Option<T>, x| Some(match m {
                        Some(m) if m > x => m,
                        _ => x,
                    }))
                    .expect("row with no visible positions");
                let weights: Vec<T> = logits
                    .iter()
                    .map(|l| l.map_or(T::zero(), |l| (l - max).exp()))
                    .collect();
                let z = weights.iter().fold(T::zero(), |a, &w| a + w);
                let inv = T::from_f64(1.0) / z;
                for c in 0..dh {
                    let s = (0..memory.rows).fold(T::zero(), |s, j| s + weights[j] * v.at(j, h * dh + c));
                    *cat.at_mut(i, h * dh + c) = s * inv;
                }
            }
        }
        self.linear(&a.o, &cat)
    }

    fn label_table<T: Real>(&self, id: ParamId, labels: &Square<u16>) -> impl Fn(usize, usize, usize) -> T {
        let table = self.get(id).clone();
        let labels = labels.clone();
        move |h, i, j| T::from_f64(table.get(labels.get(i, j) as usize, h))
    }

    fn embed<T: Real>(&self, tok: ParamId, pos: ParamId, ids: &[u32]) -> Mat<T> {
        let (t, p) = (self.get(tok), self.get(pos));
        let cols = t.cols();
        let mut out = Mat::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            for c in 0..cols {
                *out.at_mut(r, c) = T::from_f64(t.get(id as usize, c)) + T::from_f64(p.get(r, c));
            }
        }
        out
    }
}

fn post_ln_block<T: Real>(p: &Params, x: &Mat<T>, sub: &Mat<T>, n1: &LayerNorm, ff: &FeedForward, n2: &LayerNorm) -> Mat<T> {
    let h = p.layer_norm(n1, &x.add(sub));
    let f = p.feed_forward(ff, &h);
    p.layer_norm(n2, &h.add(&f))
}

fn entity_layer<T: Real>(p: &Params, l: &EntityLayer, x: &Mat<T>, prep: &PreparedGraph, model: &Model) -> Mat<T> {
    let ab = &model.config.encoder.ablation;
    let x_lin = p.attention(&l.linear_attn, x, x, |_, _, _| Some(T::zero()));
    let spans = prep.entity.spans.units();
    let m = prep.entity.spans.num_units();
    let mut pooled = Mat::zeros(m, x.cols);
    let mut counts = vec![0usize; m];
    for (i, u) in spans.iter().enumerate() {
        if let Some(u) = *u {
            counts[u] += 1;
            for c in 0..x.cols {
                *pooled.at_mut(u, c) = pooled.at(u, c) + x_lin.at(i, c);
            }
        }
    }
    for (u, &n) in counts.iter().enumerate() {
        for c in 0..x.cols {
            *pooled.at_mut(u, c) = pooled.at(u, c) / T::from_f64(n as f64);
        }
    }
    let gamma = p.label_table::<T>(l.label_bias, &prep.entity_labels);
    let adj = &prep.matrices.adj;
    let x_g = p.attention(&l.structure_attn, &pooled, &pooled, |h, i, j| {
        let mut b = T::zero();
        if ab.adjacency {
            b = b + T::from_f64(adj.get(i, j) as f64);
        }
        if ab.entity_bias {
            b = b + gamma(h, i, j);
        }
        Some(b)
    });
    let mut fused = x_lin.clone();
    for (i, u) in spans.iter().enumerate() {
        if let Some(u) = *u {
            for c in 0..x.cols {
                *fused.at_mut(i, c) = x_g.at(u, c) + x_lin.at(i, c);
            }
        }
    }
    post_ln_block(p, x, &fused, &l.norm1, &l.ff, &l.norm2)
}

fn word_layer<T: Real>(p: &Params, l: &WordLayer, x: &Mat<T>, prep: &PreparedGraph, model: &Model) -> Mat<T> {
    let on = model.config.encoder.ablation.word_bias;
    let gamma = p.label_table::<T>(l.label_bias, &prep.word_labels);
    let x_w = p.attention(&l.attn, x, x, |h, i, j| Some(if on { gamma(h, i, j) } else { T::zero() }));
    post_ln_block(p, x, &x_w, &l.norm1, &l.ff, &l.norm2)
}

fn aggregate<T: Real>(p: &Params, agg: &Aggregation, x_e: &Mat<T>, x_w: &Mat<T>, lambda: f64) -> Mat<T> {
    let lam = T::from_f64(lambda);
    let mut c = x_e.clone();
    c.rows += x_w.rows;
    c.data.extend(x_w.data.iter().map(|&v| v * lam));
    let x_c = p.attention(&agg.attn, &c, &c, |_, _, _| Some(T::zero()));
    let f = p.feed_forward(&agg.ff, &x_c.add(&c));
    p.layer_norm(&agg.norm, &f.add(&x_c))
}

fn encode<T: Real>(p: &Params, model: &Model, prep: &PreparedGraph) -> Mat<T> {
    let ep = &model.params.encoder;
    let cfg = &model.config.encoder;
    let mut x_e = p.embed(model.params.tok_emb, ep.entity_pos, &prep.entity.tokens);
    for l in &ep.entity_layers {
        x_e = entity_layer(p, l, &x_e, prep, model);
    }
    let (x_w, lambda) = if cfg.ablation.word_module {
        let mut x_w = p.embed(model.params.tok_emb, ep.word_pos, &prep.word.tokens);
        for l in &ep.word_layers {
            x_w = word_layer(p, l, &x_w, prep, model);
        }
        (x_w, cfg.lambda)
    } else {
        (Mat::zeros(prep.word_len(), cfg.d_model), 0.0)
    };
    aggregate(p, &ep.aggregation, &x_e, &x_w, lambda)
}

fn decoder_layer<T: Real>(p: &Params, l: &DecoderLayer, x: &Mat<T>, memory: &Mat<T>) -> Mat<T> {
    let s = p.attention(&l.self_attn, x, x, |_, i, j| (j <= i).then(T::zero));
    let h = p.layer_norm(&l.norm1, &x.add(&s));
    let c = p.attention(&l.cross_attn, &h, memory, |_, _, _| Some(T::zero()));
    let h2 = p.layer_norm(&l.norm2, &h.add(&c));
    let f = p.feed_forward(&l.ff, &h2);
    p.layer_norm(&l.norm3, &h2.add(&f))
}

/// Encoder output computed by the reference forward.
#[derive(Debug, Clone)]
pub struct Memory<T>(Mat<T>);

/// Runs the encoder with parameter values read from `store` (laid out as
/// `model.store`).
pub fn encoder_memory<T: Real>(model: &Model, store: &ParamStore, prep: &PreparedGraph) -> Memory<T> {
    Memory(encode(&Params { store }, model, prep))
}

/// Summed NLL of `target` given decoder `input`, dropout off, with parameter
/// values read from `store` (laid out as `model.store`).
pub fn instance_nll<T: Real>(model: &Model, store: &ParamStore, prep: &PreparedGraph, input: &[u32], target: &[u32]) -> T {
    decoder_nll(model, store, &encoder_memory(model, store, prep), input, target)
}

/// The decoder half of [`instance_nll`].
pub fn decoder_nll<T: Real>(model: &Model, store: &ParamStore, memory: &Memory<T>, input: &[u32], target: &[u32]) -> T {
    let p = Params { store };
    let memory = &memory.0;
    let mp = &model.params;
    let mut x = p.embed(mp.tok_emb, mp.decoder.pos, input);
    for l in &mp.decoder.layers {
        x = decoder_layer(&p, l, &x, memory);
    }
    let emb = p.get(mp.tok_emb);
    let bias = p.get(mp.out_bias).data();
    let mut total = T::zero();
    for (i, &y) in target.iter().enumerate() {
        if y == vocab::PAD {
            continue;
        }
        let logits: Vec<T> = (0..emb.rows())
            .map(|v| (0..x.cols).fold(T::from_f64(bias[v]), |s, c| s + x.at(i, c).mul_f64(emb.get(v, c))))
            .collect();
        let max = logits.iter().copied().fold(logits[0], |m, l| if l > m { l } else { m });
        let z = logits.iter().fold(T::zero(), |s, &l| s + (l - max).exp());
        total = total + (max + z.ln() - logits[y as usize]);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Ablation, Profile};
    use crate::kg::{KnowledgeGraph, Triple};
    use crate::layers::Dropout;
    use crate::seq2seq::teacher_forcing_pair;
    use crate::tensor::Tape;
    use crate::vocab::Vocab;
    use rand::{Rng, SeedableRng};

    fn tape_nll(m: &Model, prep: &PreparedGraph, input: &[u32], target: &[u32]) -> f64 {
        let mut t = Tape::new(&m.store);
        let enc = m.encode(&mut t, prep, &mut Dropout::disabled()).unwrap();
        let logits = m.decode_logits(&mut t, enc.output, input, &mut Dropout::disabled()).unwrap();
        let l = t.cross_entropy_nll(logits, target, Some(vocab::PAD)).unwrap();
        t.scalar(l)
    }

    fn setup(ablation: Ablation) -> (Model, PreparedGraph, Vec<u32>, Vec<u32>) {
        let mut cfg = Profile::Desk.model();
        cfg.encoder.ablation = ablation;
        let text = "ann lee wrote it in rome";
        let vocab = Vocab::from_words(text.split(' ').chain(["author", "city"]));
        let mut m = Model::new(cfg, vocab, 2).unwrap();
        // move off the initial point so bias tables and gains are non-trivial
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            m.store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x += rng.gen_range(-0.2..0.2));
        }
        let g = KnowledgeGraph::new(vec![Triple::new("it", "author", "ann lee"), Triple::new("it", "city", "rome")]).unwrap();
        let prep = m.prepare(&g).unwrap();
        let (input, target) = teacher_forcing_pair(&m.vocab, text, 128);
        (m, prep, input, target)
    }

    #[test]
    fn f64_reference_matches_tape() {
        for ab in [Ablation::default(), Ablation::no_structure(), Ablation { word_module: false, ..Ablation::default() }] {
            let (m, prep, input, target) = setup(ab);
            let a = tape_nll(&m, &prep, &input, &target);
            let b: f64 = instance_nll(&m, &m.store, &prep, &input, &target);
            assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn double_double_agrees_with_f64() {
        let (m, prep, input, target) = setup(Ablation::default());
        let a: f64 = instance_nll(&m, &m.store, &prep, &input, &target);
        let b: DoubleDouble = instance_nll(&m, &m.store, &prep, &input, &target);
        assert!((a - b.to_f64()).abs() <= 1e-12 * a.abs());
    }
}
