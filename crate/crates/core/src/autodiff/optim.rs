//! AdamW with a linear-warmup cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::ParamGrads;
use super::params::{Archive, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then cosine decay to `min_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub peak: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps.min(step)) as f64 / decay_steps as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Biases, norms and embedding tables are decayed alike.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut ParamGrads<T>, lr: f64) {
        let c = self.config;
        if c.clip_norm > 0.0 {
            let norm = grads.global_norm().as_f64();
            if norm > c.clip_norm {
                grads.scale(T::of(c.clip_norm / norm));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);

        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            let g = grads.get(id).expect("id from grads");
            let p = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv *= decay;
                *pv -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// Moment tensors as `optim.m.<name>` / `optim.v.<name>` archive entries.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut ids: Vec<&ParamId> = self.moments.keys().collect();
        ids.sort();
        let mut out = Vec::new();
        for id in ids {
            let (m, v) = &self.moments[id];
            out.push((format!("optim.m.{}", store.name(*id)), m.clone()));
            out.push((format!("optim.v.{}", store.name(*id)), v.clone()));
        }
        out
    }

    pub fn import(&mut self, store: &ParamStore<T>, archive: &Archive<T>, step: u64) {
        self.step = step;
        self.moments.clear();
        for id in store.ids() {
            let name = store.name(id);
            if let (Some(m), Some(v)) = (
                archive.get(&format!("optim.m.{name}")),
                archive.get(&format!("optim.v.{name}")),
            ) {
                self.moments.insert(id, (m.clone(), v.clone()));
            }
        }
    }
}
