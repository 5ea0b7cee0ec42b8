//! Named parameter registry.
//!
//! Models register their leaf tensors here under stable, unique names.  The
//! registry drives the optimizer (deterministic insertion order), the
//! checkpoint container (name -> array) and finite-difference checking
//! (snapshot / restore).

use std::collections::HashMap;

use crate::error::{Result, SeqPeError};
use crate::numerics::tensor::Tensor;

/// One registered leaf tensor.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
    /// Frozen parameters are checkpointed but never receive gradients or
    /// optimizer updates (their tensor is a constant).
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Default)]
pub struct ParamSet {
    items: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf under a unique name and hands back a handle to it.
    pub fn register(&mut self, name: &str, tensor: Tensor, decay: bool) -> Result<Tensor> {
        if self.by_name.contains_key(name) {
            return Err(SeqPeError::ParamRegistry(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        if !tensor.requires_grad() {
            return Err(SeqPeError::ParamRegistry(format!(
                "parameter {name:?} must be a leaf with requires_grad"
            )));
        }
        self.by_name.insert(name.to_string(), self.items.len());
        self.items.push(Parameter {
            name: name.to_string(),
            tensor: tensor.clone(),
            decay,
            trainable: true,
        });
        Ok(tensor)
    }

    /// Registers a frozen constant: saved and restored with checkpoints but
    /// excluded from gradients and optimizer updates.
    pub fn register_frozen(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if self.by_name.contains_key(name) {
            return Err(SeqPeError::ParamRegistry(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        if tensor.requires_grad() {
            return Err(SeqPeError::ParamRegistry(format!(
                "frozen parameter {name:?} must be a constant tensor"
            )));
        }
        self.by_name.insert(name.to_string(), self.items.len());
        self.items.push(Parameter {
            name: name.to_string(),
            tensor: tensor.clone(),
            decay: false,
            trainable: false,
        });
        Ok(tensor)
    }

    /// Absorbs all parameters of `other`, prefixing their names.
    pub fn adopt(&mut self, prefix: &str, other: ParamSet) -> Result<()> {
        for p in other.items {
            let name = format!("{prefix}.{}", p.name);
            if self.by_name.contains_key(&name) {
                return Err(SeqPeError::ParamRegistry(format!(
                    "duplicate parameter name {name:?}"
                )));
            }
            self.by_name.insert(name.clone(), self.items.len());
            self.items.push(Parameter {
                name,
                tensor: p.tensor,
                decay: p.decay,
                trainable: p.trainable,
            });
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.items[i])
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.items.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.items {
            p.tensor.zero_grad();
        }
    }

    /// Copies of all parameter values, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|p| p.tensor.to_vec()).collect()
    }

    /// Restores values captured by [`ParamSet::snapshot`].
    pub fn restore(&self, snap: &[Vec<f64>]) {
        assert_eq!(snap.len(), self.items.len(), "snapshot layout mismatch");
        for (p, s) in self.items.iter().zip(snap) {
            p.tensor.update_data(|d| d.copy_from_slice(s));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_rejects_duplicates_and_non_leaves() {
        let mut ps = ParamSet::new();
        let w = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        ps.register("w", w, true).unwrap();
        let w2 = Tensor::leaf(&[2], vec![0.0; 2]).unwrap();
        assert!(ps.register("w", w2, true).is_err());
        let c = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(ps.register("c", c, false).is_err());
    }

    #[test]
    fn adopt_prefixes_names_in_order() {
        let mut inner = ParamSet::new();
        inner
            .register("a", Tensor::leaf(&[1], vec![1.0]).unwrap(), false)
            .unwrap();
        inner
            .register("b", Tensor::leaf(&[1], vec![2.0]).unwrap(), true)
            .unwrap();
        let mut outer = ParamSet::new();
        outer
            .register("top", Tensor::leaf(&[1], vec![0.0]).unwrap(), true)
            .unwrap();
        outer.adopt("sub", inner).unwrap();
        let names: Vec<&str> = outer.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, vec!["top", "sub.a", "sub.b"]);
        assert!(outer.get("sub.b").unwrap().decay);
    }

    #[test]
    fn frozen_params_are_tracked_but_constant() {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::leaf(&[1], vec![1.0]).unwrap(), false)
            .unwrap();
        let z = ps
            .register_frozen("zero_row", Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap())
            .unwrap();
        assert_eq!(ps.len(), 2);
        assert!(!ps.get("zero_row").unwrap().trainable);
        assert!(!z.requires_grad());
        // A trainable leaf cannot be registered as frozen and vice versa.
        assert!(ps
            .register_frozen("bad", Tensor::leaf(&[1], vec![0.0]).unwrap())
            .is_err());
        // Snapshot round-trips include the frozen entry.
        let snap = ps.snapshot();
        assert_eq!(snap[1], vec![0.0; 3]);
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut ps = ParamSet::new();
        let w = ps
            .register("w", Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let snap = ps.snapshot();
        w.update_data(|d| d[0] = 99.0);
        ps.restore(&snap);
        assert_eq!(w.to_vec(), vec![1.0, 2.0]);
    }
}
