use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Insert a `rows x cols` tensor drawn from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// with `fan_in = rows`.
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor { shape: vec![rows, cols], data });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Hex SHA-256 over name, shape and little-endian values of every tensor
    /// whose name passes `include`, in name order.
    pub fn content_hash(&self, include: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if !include(name) {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &x in &t.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Put every tensor on `tape`. Tensors for which `trainable` is false
    /// become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = tape.leaf(t.clone(), trainable(k));
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn into_named(self) -> Vec<(String, Tensor)> {
        self.tensors.into_iter().collect()
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        Self { tensors: named.into_iter().collect() }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
