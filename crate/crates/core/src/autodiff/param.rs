use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters still receive gradients but are skipped by optimizers.
    pub frozen: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: id.into(),
            value,
            grad,
            frozen: false,
        }
    }
}

/// Named parameter storage, iterated in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; ids must be unique.
    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) -> Result<()> {
        let id = id.into();
        if self.position(&id).is_some() {
            return Err(Error::Contract(format!("duplicate parameter id `{id}`")));
        }
        self.index.insert(id.clone(), self.params.len());
        self.params.push(Parameter::new(id, value));
        Ok(())
    }

    pub(crate) fn position(&self, id: &str) -> Option<usize> {
        if self.index.len() == self.params.len() {
            self.index.get(id).copied()
        } else {
            // Index is skipped by serde; fall back to a scan after deserializing.
            self.params.iter().position(|p| p.id == id)
        }
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.position(id).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.position(id).map(move |i| &mut self.params[i])
    }

    pub(crate) fn by_position(&self, pos: usize) -> &Parameter {
        &self.params[pos]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients computed on `tape` into every parameter bound to it.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (pos, var) in tape.bound_params() {
            if let Some(g) = grads.get(var) {
                self.params[pos].grad.add_assign(g);
            }
        }
    }

    /// Sets the frozen flag on every parameter whose id starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.id.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Copies parameter values from `other`, matched by id.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .get(&p.id)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{}`", p.id)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::dim(
                    "load_values",
                    format!(
                        "`{}`: {:?} vs {:?}",
                        p.id,
                        p.value.shape(),
                        src.value.shape()
                    ),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// All parameter values concatenated in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// All gradients concatenated in registration order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// Overwrites parameter values from a flat vector laid out as [`Self::flat_values`].
    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::dim(
                "set_flat_values",
                format!(
                    "expected {} values, got {}",
                    self.num_values(),
                    values.len()
                ),
            ));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value
                .data_mut()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
