//! RMSProp with per-parameter mean-square accumulators.

use serde::{Deserialize, Serialize};

use super::tensor::Param;
use crate::error::{Error, Result};

/// Optimizer state: one nonnegative accumulator per parameter component,
/// aligned with the parameter registry order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    acc: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64) -> Self {
        RmsProp {
            learning_rate,
            decay: 0.9,
            epsilon: 1e-8,
            acc: Vec::new(),
        }
    }

    /// `acc <- decay*acc + (1-decay)*g^2 ; p <- p - lr*g/sqrt(acc + eps)`.
    ///
    /// Parameters must always be passed in the same registry order, since
    /// accumulators are positional.
    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        if self.acc.is_empty() {
            self.acc = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.acc.len() != params.len() {
            return Err(Error::InvalidParam(format!(
                "optimizer tracks {} tensors, got {}",
                self.acc.len(),
                params.len()
            )));
        }
        for (p, acc) in params.iter().zip(self.acc.iter_mut()) {
            let g = p.grad_vec();
            let mut t = p.borrow_mut();
            let data = t.data_mut();
            for ((x, a), gi) in data.iter_mut().zip(acc.iter_mut()).zip(&g) {
                *a = self.decay * *a + (1.0 - self.decay) * gi * gi;
                *x -= self.learning_rate * gi / (*a + self.epsilon).sqrt();
            }
        }
        Ok(())
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.acc
    }

    pub fn set_accumulators(&mut self, acc: Vec<Vec<f64>>) {
        self.acc = acc;
    }
}
