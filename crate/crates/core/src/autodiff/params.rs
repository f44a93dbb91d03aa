use std::collections::BTreeMap;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order, each with a trainable flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Sets the flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|name, _| !name.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Moves every parameter of `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.value, p.trainable)?;
        }
        Ok(())
    }

    /// A copy restricted to names starting with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// SHA-256 over the names and little-endian bytes of every parameter
    /// starting with `prefix` (all parameters for `""`).
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Gradient per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor) {
        match self.grads.get_mut(name) {
            Some(g) => g.add_assign(grad),
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            self.accumulate(name, g);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Splits into gradients whose names start with `prefix` and the rest.
    pub fn partition_prefix(self, prefix: &str) -> (Gradients, Gradients) {
        let (hit, rest): (BTreeMap<_, _>, BTreeMap<_, _>) =
            self.grads.into_iter().partition(|(n, _)| n.starts_with(prefix));
        (Gradients { grads: hit }, Gradients { grads: rest })
    }

    pub(crate) fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }
}

/// `param -= lr * grad` for trainable parameters; frozen ones are skipped.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = store
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("`{name}` is {:?}, gradient {:?}", p.value.shape(), g.shape()),
            ));
        }
        if p.trainable {
            p.value.add_scaled(g, -lr);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0), trainable).unwrap();
        s
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.accumulate("w", &Tensor::scalar(v));
        g
    }

    #[test]
    fn sgd_updates_trainable() {
        let mut s = store(true);
        sgd_step(&mut s, &grad(2.0), 0.1).unwrap();
        assert!((s.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_frozen_and_zero_lr() {
        let mut s = store(false);
        sgd_step(&mut s, &grad(123.0), 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 1.0);
        let mut t = store(true);
        sgd_step(&mut t, &grad(5.0), 0.0).unwrap();
        assert_eq!(t.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store(true);
        assert!(s.insert("w", Tensor::scalar(0.0), true).is_err());
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = grad(3.0);
        g.accumulate("v", &Tensor::scalar(4.0));
        g.clip_global_norm(1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
