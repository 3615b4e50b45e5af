//! Named parameter collections and initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// An ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Uniform Glorot initialization of an `out × in` weight.
    pub fn push_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out: usize,
        inp: usize,
        rng: &mut R,
    ) -> usize {
        let limit = (6.0 / (out + inp) as f64).sqrt();
        let data = (0..out * inp).map(|_| rng.random_range(-limit..limit)).collect();
        self.push(name, Tensor::from_vec(out, inp, data))
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.push(name, Tensor::zeros(rows, cols))
    }

    pub fn push_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> usize {
        self.push(name, Tensor::filled(rows, cols, v))
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
