//! Named parameters, their optimizer groups, and binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer group. A: EEG side, projection head and temperature.
/// B: filter generator, fusion and prompt tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Frozen,
    Trainable(Group),
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub role: Role,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn frozen(&self) -> bool {
        self.role == Role::Frozen
    }

    pub fn group(&self) -> Option<Group> {
        match self.role {
            Role::Frozen => None,
            Role::Trainable(g) => Some(g),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, role, grad: None });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// SHA-256 over the encoded values of the selected parameters, in registry order.
    pub fn hash_where(&self, pred: impl Fn(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(p)) {
            h.update(p.name.as_bytes());
            h.update(p.value.to_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn frozen_hash(&self) -> String {
        self.hash_where(Parameter::frozen)
    }

    pub fn full_hash(&self) -> String {
        self.hash_where(|_| true)
    }

    /// Adds gradients gathered by [`Ctx::into_grads`] into the parameters.
    pub fn accumulate_grads(&mut self, grads: Vec<(usize, Tensor)>) -> Result<()> {
        for (i, g) in grads {
            let p = &mut self.params[i];
            if p.frozen() {
                continue;
            }
            if p.value.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient for {} has shape {:?}", p.name, g.shape())));
            }
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// A forward pass: the tape plus lazily bound parameters.
pub struct Ctx<'a> {
    pub g: &'a Graph,
    params: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    train: bool,
}

impl<'a> Ctx<'a> {
    /// `train = false` binds every parameter as a constant.
    pub fn new(g: &'a Graph, params: &'a ParamStore, train: bool) -> Self {
        Self { g, params, bound: RefCell::new(vec![None; params.len()]), train }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        let i = *self.params.index.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(v) = self.bound.borrow()[i] {
            return Ok(v);
        }
        let p = &self.params.params[i];
        let v = self.g.leaf(p.value.clone(), self.train && !p.frozen());
        self.bound.borrow_mut()[i] = Some(v);
        Ok(v)
    }

    /// Binds `name` to an existing tape node instead of a fresh leaf.
    pub fn bind(&self, name: &str, v: Var) -> Result<()> {
        let i = *self.params.index.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        self.bound.borrow_mut()[i] = Some(v);
        Ok(())
    }

    pub fn bound(&self) -> Vec<(usize, Var)> {
        self.bound.borrow().iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect()
    }

    /// Tape gradients of the bound parameters, keyed by registry index.
    pub fn into_grads(self) -> Vec<(usize, Tensor)> {
        self.bound().into_iter().filter_map(|(i, v)| self.g.grad(v).map(|g| (i, g))).collect()
    }

    /// `x · W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(&self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }
}

/// Registers a `fan_in -> fan_out` linear layer with Gaussian weights scaled by `1/sqrt(fan_in)`.
pub fn register_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    role: Role,
    rng: &mut R,
) -> Result<()> {
    let w = Tensor::randn([fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
    store.insert(format!("{prefix}.weight"), w, role)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros([fan_out]), role)
}
