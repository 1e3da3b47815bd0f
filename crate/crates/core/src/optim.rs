//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((w, m), v), &gi) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(format!("{prefix}.step"), self.step.to_string());
        for (k, t) in &self.m {
            ckpt.insert(format!("{prefix}.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            ckpt.insert(format!("{prefix}.v.{k}"), t.clone());
        }
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.step = ckpt
            .meta(&format!("{prefix}.step"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Integrity(format!("missing {prefix}.step")))?;
        self.m.clear();
        self.v.clear();
        let m_prefix = format!("{prefix}.m.");
        let v_prefix = format!("{prefix}.v.");
        for (k, t) in &ckpt.entries {
            if let Some(name) = k.strip_prefix(&m_prefix) {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&v_prefix) {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        Ok(())
    }
}
