//! Shared parameter handles and named parameter sets.
//!
//! Models hold `SharedTensor` handles so the tape can write gradients back
//! and the optimizer can update in place. A [`ParamSet`] gives every
//! parameter a stable name; the checkpoint name table, freeze hashing, and
//! optimizer slot order all key off it.

use std::cell::RefCell;
use std::rc::Rc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type SharedTensor = Rc<RefCell<Tensor>>;

pub fn shared(t: Tensor) -> SharedTensor {
    Rc::new(RefCell::new(t))
}

/// Ordered, named collection of shared parameters. Insertion order is fixed
/// at construction, so optimizer state lines up across runs.
#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, SharedTensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a (unique) stable name. Returns the handle.
    pub fn register(&mut self, name: &str, t: Tensor) -> SharedTensor {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        let h = shared(t.with_grad());
        self.entries.push((name.to_string(), Rc::clone(&h)));
        h
    }

    pub fn adopt(&mut self, name: &str, h: &SharedTensor) {
        debug_assert!(!self.entries.iter().any(|(n, _)| n == name));
        self.entries.push((name.to_string(), Rc::clone(h)));
    }

    /// Merge another set under this one (names must stay unique).
    pub fn extend(&mut self, other: &ParamSet) {
        for (n, h) in &other.entries {
            self.adopt(n, h);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SharedTensor)> {
        self.entries.iter().map(|(n, h)| (n.as_str(), h))
    }

    pub fn get(&self, name: &str) -> Option<&SharedTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, h)| h)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Entries that currently require gradients, in registration order.
    pub fn trainable(&self) -> Vec<(String, SharedTensor)> {
        self.entries
            .iter()
            .filter(|(_, h)| h.borrow().requires_grad())
            .map(|(n, h)| (n.clone(), Rc::clone(h)))
            .collect()
    }

    pub fn set_requires_grad(&self, on: bool) {
        for (_, h) in &self.entries {
            h.borrow_mut().set_requires_grad(on);
        }
    }

    pub fn reset_grads(&self) {
        for (_, h) in &self.entries {
            h.borrow_mut().reset_grad();
        }
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|(_, h)| h.borrow().numel()).sum()
    }

    /// SHA-256 over sorted (name, shape, payload bits). Bit-exact identity
    /// check used by the freeze-integrity tests.
    pub fn state_hash(&self) -> String {
        let mut sorted: Vec<_> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (name, h) in sorted {
            let t = h.borrow();
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Snapshot of the current values (used for divergence recovery and EMA
    /// bootstrapping).
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, h)| {
                let mut t = h.borrow().clone();
                t.reset_grad();
                t.set_requires_grad(false);
                (n.clone(), t)
            })
            .collect()
    }

    /// Load values by name. Every provided name must exist here with a
    /// matching shape; parameters not mentioned keep their values.
    pub fn load(&self, tensors: &[(String, Tensor)]) -> Result<usize> {
        let mut loaded = 0;
        for (name, value) in tensors {
            let handle = self.get(name).ok_or_else(|| {
                Error::Integrity(format!("unknown parameter '{name}' in state"))
            })?;
            let mut t = handle.borrow_mut();
            if t.shape() != value.shape() {
                return Err(Error::Integrity(format!(
                    "shape mismatch for '{name}': {:?} vs {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            t.data_mut().copy_from_slice(value.data());
            t.reset_grad();
            loaded += 1;
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn hash_changes_with_values() {
        let mut rng = DetRng::new(1);
        let mut set = ParamSet::new();
        let w = set.register("w", Tensor::randn(vec![2, 2], 1.0, &mut rng));
        let h1 = set.state_hash();
        w.borrow_mut().data_mut()[0] += 1.0;
        assert_ne!(h1, set.state_hash());
    }

    #[test]
    fn load_rejects_unknown_and_mismatched() {
        let mut set = ParamSet::new();
        set.register("a", Tensor::zeros(vec![2]));
        assert!(set.load(&[("b".into(), Tensor::zeros(vec![2]))]).is_err());
        assert!(set.load(&[("a".into(), Tensor::zeros(vec![3]))]).is_err());
        assert_eq!(set.load(&[("a".into(), Tensor::filled(vec![2], 5.0))]).unwrap(), 1);
        assert_eq!(set.get("a").unwrap().borrow().data(), &[5.0, 5.0]);
    }
}
