use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Linear warmup followed by linear decay to zero.
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Learning-rate multiplier at `step` (0-based) out of `total`.
pub fn lr_factor(schedule: Schedule, step: usize, total: usize, warmup_frac: f64) -> f64 {
    match schedule {
        Schedule::Constant => 1.0,
        Schedule::Polynomial => {
            let warmup = ((total as f64) * warmup_frac).round() as usize;
            let s = step + 1;
            if s <= warmup {
                s as f64 / warmup as f64
            } else if total <= warmup {
                1.0
            } else {
                ((total - s.min(total)) as f64 / (total - warmup) as f64).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// One update with learning rate `cfg.lr * factor`. Biases (rank-1
    /// tensors) are not decayed.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], factor: f64) {
        self.t += 1;
        let c = self.cfg;
        let lr = c.lr * factor;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = p.shape.len() > 1;
            for (j, x) in p.data.iter_mut().enumerate() {
                let g = grads[i][j].as_f64();
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mut w = x.as_f64();
                if decay {
                    w -= lr * c.weight_decay * w;
                }
                w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *x = T::c(w);
            }
        }
    }
}
