//! Named parameter store shared by every model in the crate.
//!
//! Parameters are registered in construction order (which fixes checkpoint
//! payload order), addressed by hierarchical string names, and carry a
//! `frozen` flag honored by the optimizer. Gradient buffers live here,
//! accumulated by [`crate::graph::Graph::write_grads`] and cleared with
//! [`ParamStore::zero_grads`] between steps.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
    /// Base seed for name-derived initializer streams.
    seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, frozen: false });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register a matrix initialized from N(0, std^2), drawn from a stream
    /// derived from `(store seed, name)`. Identical names yield identical
    /// values regardless of registration order, which is what makes policy
    /// variants share bit-identical base weights.
    pub fn register_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let mut rng = derive_rng(self.seed, &format!("init:{name}"));
        let normal = Normal::new(0.0f64, std).expect("std must be finite");
        let data: Vec<S> =
            (0..rows * cols).map(|_| S::from_f64(normal.sample(&mut rng))).collect();
        self.register(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.register(name, Tensor::zeros(vec![rows, cols]))
    }

    pub fn register_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.register(name, Tensor::matrix(rows, cols, vec![S::from_f64(v); rows * cols])?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<S> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<S>)> {
        self.entries.iter_mut().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = S::zero();
            }
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.entries.iter().filter(|e| !e.frozen).map(|e| e.value.numel()).sum()
    }

    /// SHA-256 over the little-endian f64 payload of one tensor.
    pub fn checksum(&self, id: ParamId) -> String {
        checksum_tensor(&self.entries[id.0].value)
    }

    /// Map of name -> checksum, for freeze-contract verification.
    pub fn checksums(&self) -> HashMap<String, String> {
        self.iter().map(|(id, e)| (e.name.clone(), self.checksum(id))).collect()
    }

    /// Draw a fresh gaussian tensor from the store's named init stream
    /// without registering it (used by tests and ad-hoc inits).
    pub fn sample_normal(&self, name: &str, n: usize, std: f64) -> Vec<S> {
        let mut rng = derive_rng(self.seed, &format!("init:{name}"));
        let normal = Normal::new(0.0f64, std).expect("std must be finite");
        (0..n).map(|_| S::from_f64(normal.sample(&mut rng))).collect()
    }
}

pub fn checksum_tensor<S: Scalar>(t: &Tensor<S>) -> String {
    let mut hasher = Sha256::new();
    for v in t.data() {
        hasher.update(v.to_le_f64_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Uniform draw helper on a caller-provided stream.
pub fn uniform_in<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_derived_init_is_order_independent() {
        let mut a: ParamStore<f64> = ParamStore::new(11);
        a.register_normal("x", 2, 3, 0.02).unwrap();
        a.register_normal("y", 2, 3, 0.02).unwrap();

        let mut b: ParamStore<f64> = ParamStore::new(11);
        b.register_normal("y", 2, 3, 0.02).unwrap();
        b.register_normal("x", 2, 3, 0.02).unwrap();

        let xa = a.value(a.id("x").unwrap()).clone();
        let xb = b.value(b.id("x").unwrap()).clone();
        assert_eq!(xa, xb);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s: ParamStore<f64> = ParamStore::new(0);
        s.register_zeros("w", 1, 1).unwrap();
        assert!(s.register_zeros("w", 1, 1).is_err());
    }

    #[test]
    fn checksum_tracks_value() {
        let mut s: ParamStore<f64> = ParamStore::new(0);
        let id = s.register_const("w", 1, 2, 1.0).unwrap();
        let c1 = s.checksum(id);
        s.entry_mut(id).value.data_mut()[0] = 2.0;
        assert_ne!(c1, s.checksum(id));
    }
}
