//! Named parameter storage and per-tape binding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            params: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let tensor = tensor.with_precision(self.precision).with_requires_grad(true);
        self.params.push(Param { name, tensor, group });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).count()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds per-parameter gradients (indexed like the store) into `grad`.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>]) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    /// Overwrites values from a name → tensor map. Every parameter must be present.
    pub fn load(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let t = values
                .get(&p.name)
                .ok_or_else(|| Error::config(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.assign(t.data())?;
        }
        Ok(())
    }
}

/// Initializers used by the model builders.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }
}

/// Maps parameters onto leaves of one tape, creating each leaf on first use.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = tape.leaf(self.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Substitutes an existing tape value for a parameter (used by gradient
    /// checks that perturb one weight).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients of every bound parameter, indexed like the store.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.map(|v| grads.get_or_zeros(tape, v)))
            .collect()
    }
}
