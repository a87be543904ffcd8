//! Central registry for model parameters and buffers.
//!
//! Layers register tensors here at construction and keep only [`ParamId`]
//! handles. Each training step mounts the store onto a fresh tape (trainable
//! entries as differentiable leaves, buffers as constants); optimizers update
//! the store in place afterwards. Registration order is the initialization
//! draw order and the checkpoint serialization order.

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Contract(format!(
                "parameter name registered twice: {name}"
            )));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Register a trainable parameter.
    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Register a non-trainable buffer (e.g. batchnorm running statistics).
    pub fn register_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Contract(format!(
                "parameter {} shape change: {:?} -> {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Find an entry by name.
    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// (name, value, trainable) in registration order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((n, v), t)| (n.as_str(), v, *t))
    }

    /// Total trainable scalar count.
    pub fn trainable_scalars(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(v, _)| v.numel())
            .sum()
    }

    /// Put every entry on a tape: trainable entries as differentiable leaves,
    /// buffers as constants. The returned handle owns its Var table, so the
    /// store stays freely borrowable afterwards.
    pub fn mount(&self, tape: &mut Tape<T>) -> Mounted {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| {
                if t {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Mounted { vars }
    }

    /// Element-type conversion (used to run the f32 model under f64 for
    /// gradient checking).
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast::<U>()).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Tape handles for one mounting of a [`ParamStore`].
pub struct Mounted {
    vars: Vec<Var>,
}

impl Mounted {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Swap the mounted var for `id` — used by gradient-check harnesses to
    /// substitute an externally tracked leaf for one parameter.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}
