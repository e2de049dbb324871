//! SGD with momentum and milestone learning-rate decay.

use super::config::OptimizerConfig;
use crate::model::{BoundParams, ModelParams};
use crate::tensor::Gradients;

#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// `lr · gamma^(milestones reached by epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.cfg.milestones.iter().filter(|&&m| m <= epoch).count();
        self.cfg.lr * self.cfg.gamma.powi(hits as i32)
    }

    /// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
    pub fn step(&mut self, params: &mut ModelParams, bound: &BoundParams, grads: &Gradients, lr: f64) {
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let velocity = &mut self.velocity;
        params.apply_gradients(bound, grads, |slot, theta, g| {
            if velocity.len() <= slot {
                velocity.resize(slot + 1, Vec::new());
            }
            let v = &mut velocity[slot];
            if v.is_empty() {
                v.resize(theta.len(), 0.0);
            }
            for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = if wd == 0.0 { gi } else { gi + wd * *t };
                *vi = mu * *vi + d;
                *t -= lr * *vi;
            }
        });
    }
}
