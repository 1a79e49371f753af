use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{Parameterized, Tensor2D};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
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

/// Adam with bias correction. State exists only for trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor2D>,
    pub v: BTreeMap<String, Tensor2D>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in model.parameters_mut() {
            if p.is_frozen() {
                continue;
            }
            let g = p.gradient();
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            let shape = p.shape();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| Tensor2D::zeros(shape.0, shape.1));
            let v = self.v.entry(p.name.clone()).or_insert_with(|| Tensor2D::zeros(shape.0, shape.1));
            if m.shape() != shape || v.shape() != shape {
                return Err(Error::Dimension(format!("optimizer state for {} has the wrong shape", p.name)));
            }
            let values = p.value.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                let gi = gi + weight_decay * values[i];
                let mi = &mut m.as_mut_slice()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let vi = &mut v.as_mut_slice()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let delta = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                if delta != 0.0 {
                    values[i] -= delta;
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}
