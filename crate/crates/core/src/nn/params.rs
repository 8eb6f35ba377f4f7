use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable parameters with gradient buffers of matching shape.
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
        let id = ParamId(self.values.len());
        self.names.push(name.into());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        id
    }

    /// Adds a parameter drawn from a normal truncated at two standard deviations.
    pub fn add_trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Stream) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.truncated_normal(std)).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape product"))
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.scale(0.0);
        }
    }

    /// Adds `grads` into the gradient buffers.
    pub fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        if grads.tensors.len() != self.grads.len() {
            return Err(Error::Shape("gradient set does not match parameter store".into()));
        }
        for (buf, g) in self.grads.iter_mut().zip(&grads.tensors) {
            if buf.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape {:?} vs {:?}", g.shape(), buf.shape())));
            }
            buf.add_assign(g);
        }
        Ok(())
    }

    /// Snapshot of the gradient buffers.
    pub fn grads(&self) -> Gradients {
        Gradients {
            tensors: self.grads.clone(),
        }
    }

    /// Copies all values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!("{:?} vs {:?}", dst.shape(), src.shape())));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}

/// One gradient tensor per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn axpy(&mut self, s: f64, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(s, b);
        }
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flattened view in parameter order.
    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    /// `max |a − b| / max(|b|_∞, floor)`, a scale-aware distance for tests and checks.
    pub fn rel_max_diff(&self, other: &Gradients, floor: f64) -> f64 {
        let scale = other.iter_values().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
        self.iter_values()
            .zip(other.iter_values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale
    }
}
