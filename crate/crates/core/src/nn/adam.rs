use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam hyperparameters. The defaults are the ones commonly used for
/// hash-grid radiance fields: a fast learning rate with a tiny epsilon so the
/// near-zero initial feature gradients still produce full-size steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-15,
        }
    }
}

/// Adam state for one parameter tensor: first/second moment buffers plus the
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(param_len: usize, cfg: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            step: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One Adam update with bias correction, applied in place. The step
    /// counter increments by exactly 1. Callers are responsible for the
    /// skip-on-non-finite policy (see the trainer), so this function assumes
    /// finite gradients.
    pub fn apply(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::usage(format!(
                "adam shapes do not match: state {}, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.cfg;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t as i32) as f32;
        let bc2 = 1.0 - (c.beta2 as f64).powi(t as i32) as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}
