//! Named parameter storage.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named tensors in a stable (sorted) order. `requires_grad` on each
/// tensor is the trainability flag applied when it is bound to a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

/// Owned per-parameter gradients, detached from any graph.
pub type NamedGrads = Vec<(String, Vec<f64>)>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter, replacing any existing one.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.requires_grad = true;
        t.grad = None;
        self.entries.insert(name.into(), t);
    }

    pub fn glorot<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        self.insert(name, Tensor::glorot(fan_in, fan_out, rng));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    /// LayerNorm gain (ones) and bias (zeros) under `prefix.gamma` / `prefix.beta`.
    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.ones(&format!("{prefix}.gamma"), &[d]);
        self.zeros(&format!("{prefix}.beta"), &[d]);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binds `name` into `g`; trainable parameters get gradients, frozen ones
    /// enter as constants.
    pub fn bind<'p>(&'p self, g: &Graph<'p>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::len)
            .sum()
    }

    /// Sets each parameter's trainability from `trainable(name)`.
    pub fn apply_mask(&mut self, trainable: impl Fn(&str) -> bool) {
        for (name, t) in self.entries.iter_mut() {
            t.requires_grad = trainable(name);
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, g) in grads {
            let t = self.get_mut(name)?;
            if t.len() != g.len() {
                return Err(Error::shape("accumulate", t.shape(), &[g.len()]));
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }

    /// Sum of squared accumulated gradients over trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|t| t.grad.as_ref())
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every accumulated gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for t in self.entries.values_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    /// Values only, for comparisons and checkpoints.
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.detached()))
            .collect()
    }
}
