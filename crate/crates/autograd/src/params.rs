//! Named parameter storage.

use std::collections::BTreeMap;

use rand::Rng;

use crate::{Gradients, Matrix};

/// Named trainable matrices, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Moves every parameter whose name starts with `prefix` into a new store.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Overwrites every entry with fresh `N(0, std^2)` samples.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for m in self.params.values_mut() {
            *m = Matrix::randn(m.rows(), m.cols(), std, rng);
        }
    }

    /// `p -= step * g` for every parameter with a gradient.
    pub fn apply_gradients(&mut self, grads: &Gradients, step: f64) {
        for (name, g) in grads.iter() {
            if let Some(p) = self.params.get_mut(name) {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= step * d;
                }
            }
        }
    }
}
