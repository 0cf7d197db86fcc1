//! Parameterized building blocks shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Half-width of the uniform initializer for projections and embeddings.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: store.add_uniform(format!("{name}.w"), d_in, d_out, INIT_SCALE, rng),
            b: Some(store.add(format!("{name}.b"), Tensor::zeros(1, d_out))),
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: store.add_uniform(format!("{name}.w"), d_in, d_out, INIT_SCALE, rng),
            b: None,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(
                format!("{name}.gain"),
                Tensor::from_vec(1, d, vec![1.0; d]).expect("sized"),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        t.layer_norm(x, g, b)
    }
}

/// Two-layer ReLU network `d → 4d → d`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(t, x)?;
        let h = t.relu(h);
        self.down.forward(t, h)
    }
}

/// Additive logit terms for one attention call.
#[derive(Debug, Default, Clone)]
pub struct AttnBias {
    /// Added to every head, e.g. the adjacency matrix or a causal mask.
    pub shared: Option<Var>,
    /// One `len × len` term per head, e.g. learned label biases.
    pub per_head: Vec<Var>,
}

/// Pre-softmax logits and attention weights, one entry per head.
#[derive(Debug, Clone, Default)]
pub struct AttnTrace {
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            // a key bias shifts every logit in a row equally, so softmax ignores it
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `softmax(Q Kᵀ / √d_head + bias) V` per head, concatenated and projected.
    pub fn forward(&self, t: &mut Tape, query: Var, memory: Var, bias: &AttnBias) -> Result<(Var, AttnTrace)> {
        let q = self.q.forward(t, query)?;
        let k = self.k.forward(t, memory)?;
        let v = self.v.forward(t, memory)?;
        let d = t.value(q).cols();
        let dh = d / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut trace = AttnTrace::default();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * dh, dh)?,
                    t.slice_cols(k, h * dh, dh)?,
                    t.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = t.matmul_t(qh, kh)?;
            let mut s = t.scale(s, inv);
            if let Some(b) = bias.shared {
                s = t.add(s, b)?;
            }
            if let Some(&b) = bias.per_head.get(h) {
                s = t.add(s, b)?;
            }
            let p = t.softmax_rows(s)?;
            outs.push(t.matmul(p, vh)?);
            trace.logits.push(s);
            trace.probs.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs)? };
        Ok((self.o.forward(t, cat)?, trace))
    }
}

/// Inverted dropout driven by a seeded generator; a no-op when disabled.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        if rate <= 0.0 {
            return Self::disabled();
        }
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, t: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - self.rate);
        let n = t.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        t.dropout(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set(store: &mut ParamStore, id: ParamId, rows: &[Vec<f64>]) {
        *store.value_mut(id) = Tensor::from_rows(rows).unwrap();
    }

    fn identity_attention(store: &mut ParamStore) -> MultiHeadAttention {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = MultiHeadAttention::new(store, "a", 2, 1, &mut rng);
        for lin in [a.q, a.k, a.v, a.o] {
            set(store, lin.w, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        }
        a
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng);
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 0.1]]).unwrap());
        let (y, _) = a.forward(&mut t, x, x, &AttnBias::default()).unwrap();
        let v = a.v.forward(&mut t, x).unwrap();
        let expect = a.o.forward(&mut t, v).unwrap();
        assert_eq!(t.value(y), t.value(expect));
    }

    #[test]
    fn two_token_hand_calculation() {
        // Q = K = V = X with identity weights, d = 2, one head.
        let mut store = ParamStore::new();
        let a = identity_attention(&mut store);
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let (y, trace) = a.forward(&mut t, x, x, &AttnBias::default()).unwrap();
        let r2 = 2f64.sqrt();
        // row 0 logits: [1/√2, 0]; row 1 logits: [0, 4/√2]
        let p0 = 1.0 / (1.0 + (-1.0 / r2).exp());
        let p1 = 1.0 / (1.0 + (-4.0 / r2).exp());
        let want = [p0, 2.0 * (1.0 - p0), 1.0 - p1, 2.0 * p1];
        for (a, b) in t.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((t.value(trace.logits[0]).get(1, 1) - 4.0 / r2).abs() < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng);
        let rows = vec![
            vec![0.1, 0.5, -0.3, 0.2],
            vec![-0.7, 0.2, 0.4, 0.0],
            vec![0.3, -0.1, 0.8, -0.5],
        ];
        let perm = [2, 0, 1];
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_rows(&rows).unwrap());
        let px = t.constant(Tensor::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap());
        let (y, _) = a.forward(&mut t, x, x, &AttnBias::default()).unwrap();
        let (py, _) = a.forward(&mut t, px, px, &AttnBias::default()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (u, v) in t.value(py).row(k).iter().zip(t.value(y).row(i)) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }
}
