use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// First and second moment buffers, one per parameter tensor.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Applies one update to `params` in place. Moment buffers are created on
    /// the first call and must keep matching the parameter shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| alloc::vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || self.first.get(i).map(Vec::len) != Some(p.len()) {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}
