//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `lr·0.5·(1 + cos(π·t/T))`, clamped to `t ≤ T`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[usize]) -> Self {
        AdamW {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Arc<Tensor>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!(
                    "{} params and {} grads for {} slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, gr)) in params.iter().zip(grads).enumerate() {
            if p.numel() != gr.len() || gr.len() != self.m[i].len() {
                return Err(Error::shape("adamw", format!("slot {} size mismatch", i)));
            }
            if gr.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in slot {}", i)));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
            let data = Arc::make_mut(p).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gr[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gr[j] * gr[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}
