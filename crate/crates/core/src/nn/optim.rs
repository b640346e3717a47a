//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use super::model::Model;

/// Optimizer hyperparameters. Defaults: beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment state, one pair of buffers per trainable tensor.
#[derive(Clone, Debug)]
pub struct AdamWState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(model: &mut Model) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |p| {
            if p.grad.is_some() {
                m.push(vec![0.0; p.data.len()]);
            }
        });
        let v = m.clone();
        Self { m, v, step: 0 }
    }

    /// One decoupled-decay update over every trainable tensor:
    /// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    pub fn step(&mut self, model: &mut Model, config: &AdamWConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - config.beta1.powf(t);
        let bc2 = 1.0 - config.beta2.powf(t);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params(&mut |p| {
            let grad = match p.grad {
                Some(g) => g,
                None => return,
            };
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            idx += 1;
            for i in 0..p.data.len() {
                let g = grad[i];
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= config.learning_rate
                    * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * p.data[i]);
            }
        });
    }
}
