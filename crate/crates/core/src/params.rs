//! Named parameter storage.
//!
//! Modules hold [`ParamId`]s and read the current tensors from a
//! [`ParamStore`] on every forward pass. Learnable parameters are leaves
//! that track gradients; frozen ones are plain tensors, so the tape never
//! records gradient work for them while still propagating through them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vkd_tensor::Tensor;

use crate::error::{Result, VkdError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, frozen: bool, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(VkdError::Contract(format!("duplicate parameter name {}", name)));
        }
        let value = Tensor::new(shape, data)?.leaf_with_grad(!frozen);
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value, frozen, decay });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.param(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces the values of a parameter, producing a fresh leaf (which also
    /// discards any accumulated gradient).
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        let value = Tensor::new(p.value.shape(), data)?.leaf_with_grad(!p.frozen);
        p.value = value;
        Ok(())
    }

    /// Swaps in a tensor of the same shape as the stored value, keeping it
    /// exactly as given (including its place on the tape).
    pub fn replace(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(VkdError::Contract(format!("{}: shape {:?} expected, got {:?}", p.name, p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    /// Sets a frozen parameter's values. Intended for rigged test
    /// configurations and checkpoint loading.
    pub fn set_by_name(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| VkdError::Contract(format!("no parameter named {}", name)))?;
        if data.len() != self.get(id).numel() {
            return Err(VkdError::Contract(format!(
                "{} has {} entries, got {}",
                name,
                self.get(id).numel(),
                data.len()
            )));
        }
        self.set(id, data)
    }

    pub fn learnable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| p.frozen).map(|p| p.value.numel()).sum()
    }
}

/// Registers parameters under a name prefix, drawing values from a seeded
/// generator in registration order.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub frozen: bool,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, frozen: bool) -> Self {
        Init { store, rng, frozen, prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Init) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{}.{}", saved, name) };
        let out = f(self);
        self.prefix = saved;
        out
    }

    /// Runs `f` with a different frozen flag.
    pub fn with_frozen<R>(&mut self, frozen: bool, f: impl FnOnce(&mut Init) -> R) -> R {
        let saved = self.frozen;
        self.frozen = frozen;
        let out = f(self);
        self.frozen = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        let data: Vec<f64> = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).map_err(|e| VkdError::Numeric(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut *self.rng)).collect()
        };
        let full = self.full_name(name);
        self.store.add(&full, shape, data, self.frozen, decay)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, decay: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        let full = self.full_name(name);
        self.store.add(&full, shape, vec![value; n], self.frozen, decay)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, decay: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let full = self.full_name(name);
        self.store.add(&full, shape, data, self.frozen, decay)
    }
}
