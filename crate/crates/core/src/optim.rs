//! AdamW over the encoder's `f32` tensors, with `f64` moment estimates.

use crate::encoder::{EncoderGrads, EncoderState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 1e-4,
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
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, state: &EncoderState) -> Self {
        let zeros: Vec<Vec<f64>> = state.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with decoupled weight decay.
    pub fn step(&mut self, state: &mut EncoderState, grads: &EncoderGrads) -> Result<()> {
        if grads.tensors.len() != self.m.len() {
            return Err(Error::shape("gradient tensor count differs from optimizer state"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, t) in state.tensors_mut().into_iter().enumerate() {
            let g = &grads.tensors[k];
            if g.len() != t.data.len() {
                return Err(Error::shape(format!("gradient size mismatch for {}", t.name)));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let p = t.data[i] as f64;
                let next = p - c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p);
                t.data[i] = next as f32;
            }
        }
        Ok(())
    }
}
