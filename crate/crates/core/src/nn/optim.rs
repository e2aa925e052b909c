//! Adam with decoupled weight decay and a single-cycle cosine schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::model::Params;
use super::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `base_lr · (1 + cos(π·step/total)) / 2`, clamped to the cycle.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    (base_lr * (1.0 + (PI * frac).cos()) / 2.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl AdamState {
    pub fn new(params: &Params, base_lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            base_lr,
            weight_decay,
            total_steps,
        }
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step as usize, self.total_steps, self.base_lr)
    }

    /// One update: `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[k];
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let m = &mut self.first[k].data;
            let v = &mut self.second[k].data;
            for j in 0..p.data.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g.data[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g.data[j] * g.data[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] = p.data[j] * decay - lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
    }
}
