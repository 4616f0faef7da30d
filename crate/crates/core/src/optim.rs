//! Adam with L2 weight decay and an epoch-wise cosine schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Group, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `wd · θ` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Per-parameter moments with per-parameter step counts, so parameters
/// that sit out some steps get correct bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            v: m.clone(),
            m,
            steps: vec![0; store.len()],
        }
    }

    /// One update at rate `lr`. Parameters without a gradient, or whose
    /// group is not `allowed`, are left untouched together with their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64, allowed: impl Fn(Group) -> bool) {
        let c = &self.config;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            if !allowed(store.param(id).group) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = &mut store.get_mut(id).data;
            for j in 0..theta.len() {
                let gj = g[j] + c.weight_decay * theta[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Cosine annealing over epochs `1..=total`, from `base` at epoch 1 down
/// towards `min` at epoch `total + 1`.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, total: usize) -> f64 {
    let total = total.max(1);
    let progress = (epoch.saturating_sub(1)).min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear ramp to `base` over the first `warmup` epochs, cosine over the rest.
pub fn warmup_cosine_lr(base: f64, min: f64, epoch: usize, total: usize, warmup: usize) -> f64 {
    if epoch <= warmup {
        return base * epoch as f64 / (warmup + 1) as f64;
    }
    cosine_lr(base, min, epoch - warmup, total.saturating_sub(warmup))
}
