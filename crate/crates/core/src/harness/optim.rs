//! AdamW with decoupled weight decay, two learning-rate groups and global
//! gradient-norm clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 0.1,
        }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |p: &crate::params::Param| Tensor::zeros(p.tensor.shape()).with_precision(store.precision());
        AdamW {
            config,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .filter_map(|(_, p)| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the gradients accumulated in `store`; returns
    /// the pre-clipping gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64, lr_backbone: f64) -> f64 {
        let c = self.config;
        let norm = Self::grad_norm(store);
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / (norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((_, p), (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let rate = match p.group {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Head => lr,
            };
            m.update(|i, mi| c.beta1 * mi + (1.0 - c.beta1) * grad[i] * clip);
            v.update(|i, vi| c.beta2 * vi + (1.0 - c.beta2) * (grad[i] * clip).powi(2));
            let (md, vd) = (m.data(), v.data());
            p.tensor.update(|i, x| {
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                x - rate * c.weight_decay * x - rate * mhat / (vhat.sqrt() + c.eps)
            });
        }
        norm
    }

    /// First and second moments keyed `m.<param>` / `v.<param>`.
    pub fn state(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.insert(format!("m.{}", p.name), m.clone());
            out.insert(format!("v.{}", p.name), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (key, slot) in [(format!("m.{}", p.name), m), (format!("v.{}", p.name), v)] {
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::config(format!("optimizer state lacks {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::config(format!("optimizer state {key} has the wrong shape")));
                }
                slot.assign(t.data())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
