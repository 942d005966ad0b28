//! Named parameter tensors, bound to a tape once per forward pass.

use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Model(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f64>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name).ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replaces a tensor, keeping its position.
    pub fn set(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::shape("set", format!("{name}: {:?} vs {:?}", self.values[i].shape(), value.shape())));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Replaces a tensor with one of a different shape (warm starts).
    pub fn replace(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))?;
        self.values[i] = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<f64>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs existing tape leaves with parameter names.
    pub fn from_parts(names: &[String], vars: &[Var]) -> Self {
        Bound {
            vars: vars.to_vec(),
            index: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.get(name).ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss did not touch get zeros.
    pub fn grads(&self, tape: &Tape<f64>) -> Vec<Tensor<f64>> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}
