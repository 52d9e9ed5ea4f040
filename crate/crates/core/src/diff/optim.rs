use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First-order update rule applied to a descent direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    /// θ ← θ − lr·d.
    Sgd,
    /// Bias-corrected moment estimates of d.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer memory restricted to a mask.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    rule: Optimizer,
    mask: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl OptimizerState {
    /// Only entries with `mask[i] == true` are ever updated.
    pub fn new(rule: Optimizer, mask: Vec<bool>) -> Self {
        let n = mask.len();
        let (m, v) = match rule {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        OptimizerState {
            rule,
            mask,
            m,
            v,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], direction: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.mask.len() || direction.len() != self.mask.len() {
            return Err(Error::dims(
                "optimizer step",
                self.mask.len(),
                direction.len(),
            ));
        }
        self.steps += 1;
        match self.rule {
            Optimizer::Sgd => {
                for ((p, d), &on) in params.iter_mut().zip(direction).zip(&self.mask) {
                    if on {
                        *p -= lr * d;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for i in 0..params.len() {
                    if !self.mask[i] {
                        continue;
                    }
                    let d = direction[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * d;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * d * d;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
