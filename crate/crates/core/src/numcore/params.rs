use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors, kept in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, NumError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Registers a parameter drawn uniformly from `[-scale, scale]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId, NumError> {
        self.insert(name, Tensor::uniform(shape, scale, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Sets every parameter value to zero.
    pub fn zero_all(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    /// Rebuilds the name index; needed after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), ParamId(i))).collect();
    }

    /// Applies `θ ← θ − lr·g` for every parameter with a gradient.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        for (tensor, grad) in self.tensors.iter_mut().zip(&grads.bufs) {
            if let Some(g) = grad {
                for (w, d) in tensor.data_mut().iter_mut().zip(g) {
                    *w -= lr * d;
                }
            }
        }
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`]; parameters
/// never touched by a backward pass stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Gradients { bufs: vec![None; params.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    /// Adds `scale * g` into the buffer for `id`.
    pub fn add(&mut self, id: ParamId, g: &[f64], scale: f64) {
        let buf = self.bufs[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += scale * v;
        }
    }

    /// Adds every buffer of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients, scale: f64) {
        for (i, g) in other.bufs.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g, scale);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.bufs.iter().flatten().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().flat_map(|b| b.iter()).all(|v| v.is_finite())
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn clear(&mut self) {
        self.bufs.iter_mut().for_each(|b| *b = None);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bufs.iter().enumerate().filter_map(|(i, b)| b.as_deref().map(|b| (ParamId(i), b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_indexed() {
        let mut ps = ParamStore::new();
        let a = ps.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(ps.insert("a", Tensor::scalar(2.0)).is_err());
        assert_eq!(ps.id("a"), Some(a));
        assert_eq!(ps.name(a), "a");
    }

    #[test]
    fn clipping_keeps_direction() {
        let mut ps = ParamStore::new();
        let a = ps.insert("a", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut g = Gradients::zeros_like(&ps);
        g.add(a, &[3.0, 4.0], 1.0);
        assert_eq!(g.clip_norm(1.0), 5.0);
        let v = g.get(a).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }
}
