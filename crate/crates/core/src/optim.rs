//! Named parameters, Adam, and the warmup/decay learning-rate schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters plus their Adam moments. Frozen names are never updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.m.insert(name.clone(), Tensor::zeros(t.shape()));
        self.v.insert(name.clone(), Tensor::zeros(t.shape()));
        self.params.insert(name, t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.m.remove(name);
        self.v.remove(name);
        self.frozen.remove(name);
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    pub(crate) fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::shape("set_moments", format!("moments of `{name}`")));
        }
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Zeroes both moments and the step counter, keeping values and freezes.
    pub fn reset_optimizer(&mut self) {
        for t in self.m.values_mut().chain(self.v.values_mut()) {
            *t = Tensor::zeros(t.shape());
        }
        self.step = 0;
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn freeze(&mut self, name: &str) {
        if self.params.contains_key(name) {
            self.frozen.insert(name.to_string());
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// One Adam update with bias correction. Every trainable parameter must
    /// have a gradient of matching shape.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr}")));
        }
        for name in self.params.keys() {
            if self.frozen.contains(name) {
                continue;
            }
            let g = grads
                .param(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != self.params[name].shape() {
                return Err(Error::shape("adam_step", format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in self.params.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let g = grads.param(name).expect("checked above");
            let m = self.m.get_mut(name).expect("moment");
            let v = self.v.get_mut(name).expect("moment");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `peak_lr` over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(peak_lr > 0.0) || warmup_steps == 0 || total_steps <= warmup_steps {
            return Err(Error::invalid(format!(
                "schedule peak={peak_lr} warmup={warmup_steps} total={total_steps}"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        Ok(if step <= self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else {
            let rest = (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr * (self.total_steps - step) as f64 / rest
        })
    }
}
