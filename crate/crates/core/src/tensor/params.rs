use rand::Rng;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameters in registration order, with paired gradient buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Adds a parameter initialized uniformly in `[-scale, scale]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds `scale · g` into the stored gradients.
    pub fn accumulate(&mut self, g: &Grads, scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(&g.0) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * s;
            }
        }
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Splits into parameter values and gradients for an optimizer step.
    pub fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.sum_squares().sqrt()))
            .collect()
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(
            store
                .values
                .iter()
                .map(|v| Tensor::zeros(v.rows(), v.cols()))
                .collect(),
        )
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }
}
