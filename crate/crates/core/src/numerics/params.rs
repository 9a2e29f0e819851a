use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad());
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace values from another store with the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name} in checkpoint")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::shape(
                    "load_from",
                    format!("{name}: {:?} vs {:?}", self.tensors[id.0].shape(), t.shape()),
                ));
            }
            self.tensors[id.0] = t.clone().with_requires_grad();
        }
        if other.len() != self.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { tape, vars }
    }

    /// Register every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        Bound { tape, vars }
    }

    /// Copy gradients into each tensor's `grad` slot.
    pub fn store_grads(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = grads.get_or_zeros(v, t.len());
            let _ = t.set_grad(g);
        }
    }
}

/// Parameters registered on a tape for one forward/backward pass.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var>,
}

impl<'t> Bound<'t> {
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect()
    }
}

/// Uniform Glorot initialisation for a `fan_in x fan_out` matrix.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
