//! Reverse-mode gradient tape. Every forward op records enough state for an
//! exact analytic backward pass; parameters are read in place from the store.

use super::matrix::{dot, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    MeanPool {
        x: Var,
        units: Vec<Option<usize>>,
        counts: Vec<usize>,
    },
    Gather {
        x: Var,
        units: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    LabelBias {
        table: Var,
        labels: Vec<u16>,
        col: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Tensor,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, "add")?;
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Row-wise layer normalization with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xv.cols()) || b.shape() != (1, xv.cols()) {
            return Err(shape_err("layer_norm", xv, g));
        }
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let h = xhat.row_mut(i);
            for (hv, v) in h.iter_mut().zip(row) {
                *hv = (v - mean) * inv;
            }
            let o = out.row_mut(i);
            for j in 0..cols {
                o[j] = h[j] * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= t.rows() {
                return Err(Error::Shape {
                    op: "embedding",
                    left: t.shape(),
                    right: (id as usize, 0),
                });
            }
            out.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean of token rows per unit; `None` tokens are excluded.
    pub fn mean_pool_spans(
        &mut self,
        x: Var,
        units: &[Option<usize>],
        num_units: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        if units.len() != xv.rows() {
            return Err(Error::Shape {
                op: "mean_pool_spans",
                left: xv.shape(),
                right: (units.len(), num_units),
            });
        }
        let mut counts = vec![0usize; num_units];
        let mut out = Tensor::zeros(num_units, xv.cols());
        for (i, u) in units.iter().enumerate() {
            if let Some(u) = *u {
                counts[u] += 1;
                for (o, v) in out.row_mut(u).iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
        }
        for (u, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::EmptyUnit(u));
            }
            let inv = 1.0 / c as f64;
            out.row_mut(u).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(
            out,
            Op::MeanPool {
                x,
                units: units.to_vec(),
                counts,
            },
        ))
    }

    /// Writes each unit's row to all of its token positions, zero elsewhere.
    pub fn gather_units(&mut self, x: Var, units: &[Option<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(units.len(), xv.cols());
        for (i, u) in units.iter().enumerate() {
            if let Some(u) = *u {
                if u >= xv.rows() {
                    return Err(Error::Shape {
                        op: "gather_units",
                        left: xv.shape(),
                        right: (u, 0),
                    });
                }
                out.row_mut(i).copy_from_slice(xv.row(u));
            }
        }
        Ok(self.push(
            out,
            Op::Gather {
                x,
                units: units.to_vec(),
            },
        ))
    }

    /// Stacks along the sequence axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Stacks along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
            }
            off += t.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: xv.shape(),
                right: (start, len),
            });
        }
        let mut out = Tensor::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// `out[i][j] = table[labels[i][j]][col]` for a square label matrix.
    pub fn label_bias(&mut self, table: Var, labels: &[u16], size: usize, col: usize) -> Result<Var> {
        let t = self.value(table);
        if labels.len() != size * size || col >= t.cols() {
            return Err(Error::Shape {
                op: "label_bias",
                left: t.shape(),
                right: (size, col),
            });
        }
        let mut out = Tensor::zeros(size, size);
        for (o, &l) in out.data_mut().iter_mut().zip(labels) {
            if l as usize >= t.rows() {
                return Err(Error::Shape {
                    op: "label_bias",
                    left: t.shape(),
                    right: (l as usize, col),
                });
            }
            *o = t.get(l as usize, col);
        }
        Ok(self.push(
            out,
            Op::LabelBias {
                table,
                labels: labels.to_vec(),
                col,
            },
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; returns a `1 × 1` value. Target `skip` (if any) contributes
    /// nothing.
    pub fn cross_entropy_nll(&mut self, logits: Var, targets: &[u32], skip: Option<u32>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy_nll",
                left: lv.shape(),
                right: (targets.len(), 1),
            });
        }
        let probs = lv.softmax_rows()?;
        let mut total = 0.0;
        let mut kept = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == skip {
                kept.push(u32::MAX);
                continue;
            }
            if t as usize >= lv.cols() {
                return Err(Error::TargetOutOfVocab {
                    id: t,
                    size: lv.cols(),
                });
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            kept.push(t);
        }
        let out = Tensor::from_vec(1, 1, vec![total])?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
            },
        ))
    }

    /// Multiplies elementwise by a precomputed mask (0 or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let mut out = self.value(x).clone();
        if mask.len() != out.len() {
            return Err(Error::Shape {
                op: "dropout",
                left: out.shape(),
                right: (mask.len(), 1),
            });
        }
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut out = Grads::zeros_like(self.store);
        self.backward_into(loss, &mut out);
        out
    }

    pub fn backward_into(&self, loss: Var, out: &mut Grads) {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let seed = self.value(loss);
        let mut g0 = Tensor::zeros(seed.rows(), seed.cols());
        g0.fill(1.0);
        grads[loss.0] = Some(g0);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(id) => out.0[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    matmul_nt_acc(&g, bv, self.slot(&mut grads, *a));
                    matmul_tn_acc(av, &g, self.slot(&mut grads, *b));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // c = a bᵀ: da = g b, db = gᵀ a
                    matmul_nn_acc(&g, bv, self.slot(&mut grads, *a));
                    matmul_tn_acc(&g, av, self.slot(&mut grads, *b));
                }
                Op::Add(a, b) => {
                    self.slot(&mut grads, *a).add_assign(&g);
                    self.slot(&mut grads, *b).add_assign(&g);
                }
                Op::AddRow(a, b) => {
                    self.slot(&mut grads, *a).add_assign(&g);
                    let gb = self.slot(&mut grads, *b);
                    for i in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = self.slot(&mut grads, *a);
                    for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * v;
                    }
                }
                Op::Softmax(a) => {
                    let p = self.nodes[idx].value.as_ref().expect("softmax value");
                    let ga = self.slot(&mut grads, *a);
                    for i in 0..p.rows() {
                        let (pr, gr) = (p.row(i), g.row(i));
                        let s = dot(pr, gr);
                        for ((o, pv), gv) in ga.row_mut(i).iter_mut().zip(pr).zip(gr) {
                            *o += pv * (gv - s);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).data().to_vec();
                    let cols = xhat.cols() as f64;
                    {
                        let gg = self.slot(&mut grads, *gain);
                        for i in 0..xhat.rows() {
                            for ((o, h), d) in gg.data_mut().iter_mut().zip(xhat.row(i)).zip(g.row(i)) {
                                *o += h * d;
                            }
                        }
                    }
                    {
                        let gb = self.slot(&mut grads, *bias);
                        for i in 0..g.rows() {
                            for (o, d) in gb.data_mut().iter_mut().zip(g.row(i)) {
                                *o += d;
                            }
                        }
                    }
                    let gx = self.slot(&mut grads, *x);
                    let mut dh = vec![0.0; xhat.cols()];
                    for (i, &is) in inv_std.iter().enumerate() {
                        let h = xhat.row(i);
                        for ((d, gr), gn) in dh.iter_mut().zip(g.row(i)).zip(&gv) {
                            *d = gr * gn;
                        }
                        let sum_d: f64 = dh.iter().sum();
                        let sum_dh = dot(&dh, h);
                        let k = is / cols;
                        for ((o, d), hv) in gx.row_mut(i).iter_mut().zip(&dh).zip(h) {
                            *o += k * (cols * d - sum_d - hv * sum_dh);
                        }
                    }
                }
                Op::Relu(a) => {
                    let y = self.nodes[idx].value.as_ref().expect("relu value");
                    let ga = self.slot(&mut grads, *a);
                    for ((o, yv), gv) in ga.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                        if *yv > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let gt = self.slot(&mut grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id as usize).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::MeanPool { x, units, counts } => {
                    let gx = self.slot(&mut grads, *x);
                    for (i, u) in units.iter().enumerate() {
                        if let Some(u) = *u {
                            let inv = 1.0 / counts[u] as f64;
                            for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(u)) {
                                *o += inv * v;
                            }
                        }
                    }
                }
                Op::Gather { x, units } => {
                    let gx = self.slot(&mut grads, *x);
                    for (i, u) in units.iter().enumerate() {
                        if let Some(u) = *u {
                            for (o, v) in gx.row_mut(u).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        let cols = g.cols();
                        let gp = self.slot(&mut grads, *p);
                        for (o, v) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[off * cols..(off + rows) * cols])
                        {
                            *o += v;
                        }
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        let gp = self.slot(&mut grads, *p);
                        for i in 0..g.rows() {
                            for (o, v) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + cols]) {
                                *o += v;
                            }
                        }
                        off += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let gx = self.slot(&mut grads, *x);
                    for i in 0..g.rows() {
                        for (o, v) in gx.row_mut(i)[*start..].iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::LabelBias { table, labels, col } => {
                    let gt = self.slot(&mut grads, *table);
                    let cols = gt.cols();
                    for (&l, v) in labels.iter().zip(g.data()) {
                        gt.data_mut()[l as usize * cols + col] += v;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.data()[0];
                    let gl = self.slot(&mut grads, *logits);
                    for (i, &t) in targets.iter().enumerate() {
                        if t == u32::MAX {
                            continue;
                        }
                        for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                            *o += s * p;
                        }
                        gl.row_mut(i)[t as usize] -= s;
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = self.slot(&mut grads, *x);
                    for ((o, m), v) in gx.data_mut().iter_mut().zip(mask).zip(g.data()) {
                        *o += m * v;
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        grads[v.0].get_or_insert_with(|| {
            let (r, c) = self.value(v).shape();
            Tensor::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.add_uniform(n, r, c, 1.0, &mut rng);
        }
        s
    }

    /// Runs the analytic-vs-numeric comparison on a scalar closure.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Result<Var>) -> f64 {
        let report = grad_check(
            store,
            |s| {
                let mut t = Tape::new(s);
                let l = f(&mut t)?;
                Ok(t.scalar(l))
            },
            |s| {
                let mut t = Tape::new(s);
                let l = f(&mut t)?;
                Ok((t.scalar(l), t.backward(l)))
            },
            1e-6,
            64,
            7,
        )
        .unwrap();
        report.max_rel_error
    }

    /// Weighted sum so every output coordinate gets a distinct gradient.
    fn project(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        let (r, c) = t.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..r * c).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let wv = t.constant(Tensor::from_vec(c, r, w).unwrap());
        let prod = t.matmul(x, wv)?;
        // trace-like reduction through a ones vector
        let ones = t.constant(Tensor::from_vec(r, 1, vec![1.0; r]).unwrap());
        let col = t.matmul(prod, ones)?;
        let ones2 = t.constant(Tensor::from_vec(1, r, vec![1.0; r]).unwrap());
        t.matmul(ones2, col)
    }

    #[test]
    fn matmul_family_gradients() {
        let mut s = store_with(&[("a", 3, 4), ("b", 4, 5), ("c", 2, 4)], 1);
        let e = check(&mut s, |t| {
            let a = t.param(ParamId(0));
            let b = t.param(ParamId(1));
            let c = t.param(ParamId(2));
            let ab = t.matmul(a, b)?;
            let ca = t.matmul_t(c, a)?;
            let sc = t.scale(ca, 0.7);
            let x = project(t, ab, 2)?;
            let y = project(t, sc, 3)?;
            t.add(x, y)
        });
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn softmax_layernorm_relu_gradients() {
        let mut s = store_with(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6), ("r", 1, 6)], 4);
        let e = check(&mut s, |t| {
            let x = t.param(ParamId(0));
            let g = t.param(ParamId(1));
            let b = t.param(ParamId(2));
            let r = t.param(ParamId(3));
            let xr = t.add_row(x, r)?;
            let ln = t.layer_norm(xr, g, b)?;
            let re = t.relu(ln);
            let sm = t.softmax_rows(re)?;
            project(t, sm, 5)
        });
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn pooling_gather_concat_gradients() {
        let mut s = store_with(&[("emb", 6, 3), ("lab", 4, 2)], 8);
        let units = [None, Some(0), Some(1), None, Some(0), Some(2)];
        let e = check(&mut s, |t| {
            let emb = t.param(ParamId(0));
            let x = t.embedding(emb, &[1, 2, 2, 5, 0, 3])?;
            let p = t.mean_pool_spans(x, &units, 3)?;
            let g = t.gather_units(p, &units)?;
            let c = t.concat_rows(&[g, x])?;
            let s1 = t.slice_cols(c, 1, 2)?;
            let s0 = t.slice_cols(c, 0, 1)?;
            let cc = t.concat_cols(&[s1, s0])?;
            let lab = t.param(ParamId(1));
            let bias = t.label_bias(lab, &[0, 1, 2, 3, 3, 2, 1, 0, 1], 3, 1)?;
            let a = project(t, cc, 9)?;
            let b = project(t, bias, 10)?;
            t.add(a, b)
        });
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut s = store_with(&[("l", 3, 5)], 11);
        let e = check(&mut s, |t| {
            let l = t.param(ParamId(0));
            let mask = t.dropout(l, (0..15).map(|i| if i % 4 == 0 { 0.0 } else { 1.25 }).collect())?;
            t.cross_entropy_nll(mask, &[4, 0, 2], Some(0))
        });
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let l = t.constant(Tensor::zeros(1, 10));
        let nll = t.cross_entropy_nll(l, &[3], None).unwrap();
        assert!((t.scalar(nll) - 10f64.ln()).abs() < 1e-12);
        assert!((t.scalar(nll) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab_target() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let l = t.constant(Tensor::zeros(1, 4));
        assert!(matches!(
            t.cross_entropy_nll(l, &[4], None),
            Err(Error::TargetOutOfVocab { id: 4, size: 4 })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut s = ParamStore::new();
        let g = s.add("g", Tensor::from_vec(1, 3, vec![1.0; 3]).unwrap());
        let b = s.add("b", Tensor::zeros(1, 3));
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::from_vec(1, 3, vec![4.2; 3]).unwrap());
        let (g, b) = (t.param(g), t.param(b));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_of_one_token_units_is_restriction() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let units = [Some(1), None, Some(0)];
        let p = t.mean_pool_spans(x, &units, 2).unwrap();
        assert_eq!(t.value(p).to_rows(), vec![vec![5.0, 6.0], vec![1.0, 2.0]]);
        let g = t.gather_units(p, &units).unwrap();
        assert_eq!(
            t.value(g).to_rows(),
            vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![5.0, 6.0]]
        );
    }

    #[test]
    fn mean_pool_rejects_empty_unit() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::zeros(2, 2));
        assert!(matches!(
            t.mean_pool_spans(x, &[Some(0), Some(0)], 2),
            Err(Error::EmptyUnit(1))
        ));
    }

    #[test]
    fn mean_pool_averages_occurrences() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant(Tensor::from_rows(&[vec![2.0], vec![4.0], vec![9.0]]).unwrap());
        let p = t.mean_pool_spans(x, &[Some(0), Some(1), Some(0)], 2).unwrap();
        assert_eq!(t.value(p).data(), &[5.5, 4.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gather_pool_round_trip(
                rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..8),
                markers in prop::collection::vec(any::<bool>(), 8),
            ) {
                let s = ParamStore::new();
                let mut t = Tape::new(&s);
                // one token per unit, markers interleaved
                let mut units = Vec::new();
                let mut data = Vec::new();
                for (k, r) in rows.iter().enumerate() {
                    if markers[k] {
                        units.push(None);
                        data.push(vec![7.0; 3]);
                    }
                    units.push(Some(k));
                    data.push(r.clone());
                }
                let x = t.constant(Tensor::from_rows(&data).unwrap());
                let p = t.mean_pool_spans(x, &units, rows.len()).unwrap();
                let g = t.gather_units(p, &units).unwrap();
                for (i, u) in units.iter().enumerate() {
                    match u {
                        Some(_) => prop_assert_eq!(t.value(g).row(i), t.value(x).row(i)),
                        None => prop_assert!(t.value(g).row(i).iter().all(|&v| v == 0.0)),
                    }
                }
            }
        }
    }
}
