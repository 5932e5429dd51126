//! Decoupled-weight-decay Adam and the linear-warmup schedule.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.025,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` selects which parameters get weight decay.
    pub fn step(
        &mut self,
        params: &mut [&mut Arc<Tensor>],
        grads: &[Vec<f64>],
        decay: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            return Err(Error::dim("adamw", &[self.m.len()], &[params.len(), grads.len()]));
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let data = Arc::make_mut(p).data_mut();
            if g.len() != data.len() || self.m[i].len() != data.len() {
                return Err(Error::dim("adamw", &[data.len()], &[g.len()]));
            }
            let shrink = if decay[i] { 1.0 - lr * c.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] * shrink - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Number of warmup steps for `total` optimizer steps (at least one).
pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    ((total as f64 * ratio).ceil() as usize).max(1)
}

/// Learning rate for 0-based optimizer step `step`: linear ramp
/// `lr·(step+1)/warmup` during warmup, then constant `lr`.
pub fn lr_at(step: usize, warmup: usize, lr: f64) -> f64 {
    if step + 1 < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else {
        lr
    }
}
