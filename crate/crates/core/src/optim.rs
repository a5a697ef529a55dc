//! AdamW: bias-corrected adaptive moments with decoupled weight decay.
//! Decay touches only parameters flagged `decayed`; a step with any
//! non-finite gradient is rejected before mutating anything.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `lr_scale` multiplies the configured learning rate (used
    /// for warmup schedules) and scales the decoupled decay with it.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradStore, lr_scale: f64) -> Result<()> {
        // Validate first: a rejected step leaves parameters, moments and the
        // step counter untouched.
        for (id, p) in params.iter() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let cfg = self.config.clone();
        let lr = cfg.lr * lr_scale;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..params.len() {
            let id = ParamId(i);
            let g = grads.get(id).to_vec();
            let param = params.get_mut(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let decay = if param.decayed { cfg.weight_decay } else { 0.0 };
            for (j, x) in param.value.data.iter_mut().enumerate() {
                if decay > 0.0 {
                    *x *= 1.0 - lr * decay;
                }
                let gj = g[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Moment state for checkpointing (m, v, step).
    pub fn state(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step)
    }

    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Config(format!(
                "optimizer state has {} moment tensors, expected {}",
                m.len(),
                self.m.len()
            )));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}
