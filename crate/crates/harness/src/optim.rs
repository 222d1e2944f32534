//! Adam with decoupled weight decay and learning-rate schedules.

use hst_core::{ParamId, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decay {
    /// `peak · sqrt(warmup / step)` after warmup.
    RootSquare,
    Cosine,
    /// Linear decay to zero at the final step.
    Polynomial,
    None,
}

/// Linear warmup to `peak`, then the configured decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub decay: Decay,
}

impl Schedule {
    /// Learning rate for 1-based optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1);
        if s < self.warmup {
            return self.peak * s as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((s - self.warmup) as f64 / span).min(1.0);
        match self.decay {
            Decay::None => self.peak,
            Decay::RootSquare => self.peak * (self.warmup.max(1) as f64 / s as f64).sqrt(),
            Decay::Cosine => self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
            Decay::Polynomial => self.peak * (1.0 - progress),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to matrices (rank ≥ 2) only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` using the accumulated
    /// gradients; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if !params.trainable(id) {
                continue;
            }
            let t = params.get_mut(id);
            let Some(g) = t.grad.take() else { continue };
            let decay = if t.shape.len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for k in 0..g.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                t.data[k] -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * t.data[k]);
            }
        }
    }
}
