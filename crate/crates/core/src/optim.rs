//! First-order optimizers over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => len,
        };
        Self { kind, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; `rates[i]` is the learning rate of parameter `i`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], rates: &[f64]) -> Result<()> {
        check_len(params.len(), grads.len())?;
        check_len(params.len(), rates.len())?;
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), r) in params.iter_mut().zip(grads).zip(rates) {
                    *p -= r * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                check_len(params.len(), self.m.len())?;
                let c1 = 1.0 - libm::pow(beta1, self.t as f64);
                let c2 = 1.0 - libm::pow(beta2, self.t as f64);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= rates[i] * mh / (libm::sqrt(vh) + eps);
                }
            }
        }
        Ok(())
    }
}
