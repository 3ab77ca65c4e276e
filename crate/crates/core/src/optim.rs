//! SGD with momentum and weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::Scalar;

/// `lr(step) = lr0 · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step as f64 / total as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Heavy-ball SGD in the usual deep-learning form:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, n_params: usize) -> Self {
        Sgd {
            config,
            velocity: vec![T::zero(); n_params],
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        let lr = T::of(lr);
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = mu * *v + g + wd * *p;
            *p = *p - lr * *v;
        }
    }
}
