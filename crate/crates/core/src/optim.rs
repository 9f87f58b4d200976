//! Adam with decoupled weight decay, with inspectable state so that
//! checkpoints resume bit-identically.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nets::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug)]
struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

#[derive(Debug)]
pub struct AdamW {
    params: AdamWParams,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(store: &ParamStore, params: AdamWParams) -> Result<Self> {
        let slots = store
            .named()
            .iter()
            .map(|(name, var)| {
                Ok((
                    name.clone(),
                    Slot {
                        var: var.clone(),
                        m: var.zeros_like()?,
                        v: var.zeros_like()?,
                        steps: 0,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { params, slots })
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    /// Updates every parameter that has a gradient in `grads`; parameters
    /// without one are left untouched, moments included.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let AdamWParams {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Gradients can carry an op graph; moments must not chain onto it.
            let g = g.detach();
            slot.steps += 1;
            let t = slot.steps as i32;
            slot.m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / (1.0 - beta1.powi(t)))?;
            let v_hat = (&slot.v / (1.0 - beta2.powi(t)))?;
            let decayed = (slot.var.as_tensor() * (1.0 - lr * weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            slot.var.set(&(decayed - (update * lr)?)?.detach())?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`, plus per-parameter
    /// step counts.
    pub fn export(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, u64>) {
        let mut tensors = BTreeMap::new();
        let mut steps = BTreeMap::new();
        for (name, slot) in &self.slots {
            tensors.insert(format!("m.{name}"), slot.m.clone());
            tensors.insert(format!("v.{name}"), slot.v.clone());
            steps.insert(name.clone(), slot.steps);
        }
        (tensors, steps)
    }

    pub fn import(&mut self, tensors: &BTreeMap<String, Tensor>, steps: &BTreeMap<String, u64>) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            let get = |k: String| {
                tensors
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state `{k}` missing")))
            };
            let m = get(format!("m.{name}"))?;
            let v = get(format!("v.{name}"))?;
            if m.dims() != slot.var.dims() || v.dims() != slot.var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` has wrong shape")));
            }
            slot.m = m;
            slot.v = v;
            slot.steps = *steps
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer step count for `{name}` missing")))?;
        }
        Ok(())
    }
}
