//! Named parameter storage with per-entry freeze flags.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("parameter {0:?} already exists")]
    Duplicate(String),
    #[error("parameter {0:?} not found")]
    Missing(String),
    #[error("gradient for {name:?} has shape {got:?}, parameter has {want:?}")]
    GradShape { name: String, got: Vec<usize>, want: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, which keeps serialization and optimizer traversal deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, frozen: bool) -> Result<(), StoreError> {
        if self.entries.contains_key(name) {
            return Err(StoreError::Duplicate(name.to_string()));
        }
        self.entries.insert(name.to_string(), Param { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, StoreError> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| StoreError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, StoreError> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| StoreError::Missing(name.to_string()))
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool, StoreError> {
        self.entries
            .get(name)
            .map(|p| p.frozen)
            .ok_or_else(|| StoreError::Missing(name.to_string()))
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), StoreError> {
        self.entries
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| StoreError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Places a parameter on a tape: trainable entries become differentiable
    /// variables, frozen entries become constants.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var, BindError> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| BindError::Store(StoreError::Missing(name.to_string())))?;
        let var = if p.frozen {
            tape.constant(p.tensor.clone())
        } else {
            tape.variable(p.tensor.clone())
        };
        var.map_err(BindError::Tensor)
    }

    /// Overwrites parameter values in place, keeping the freeze flag.
    pub fn set_values(&mut self, name: &str, tensor: Tensor) -> Result<(), StoreError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| StoreError::Missing(name.to_string()))?;
        p.tensor = tensor;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BindError {
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Tensor(TensorError),
}
