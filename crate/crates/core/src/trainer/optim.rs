use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerConfig::Adam { beta1, beta2, eps } = *self {
            for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(format!("train.optimizer.{name}"), format!("must lie in [0, 1), got {b}")));
                }
            }
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::config("train.optimizer.eps", format!("must be > 0, got {eps}")));
            }
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Per-parameter optimizer state keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    learning_rate: f64,
    slots: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, learning_rate: f64) -> Self {
        Optimizer { config, learning_rate, slots: BTreeMap::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Number of parameters with moment estimates.
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Applies one update to `param`. `t` counts updates from 1 and drives
    /// Adam's bias correction.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, t: u64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                node: name.to_string(),
                detail: format!("parameter {:?} but gradient {:?}", param.shape(), grad.shape()),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        let lr = self.learning_rate;
        match self.config {
            OptimizerConfig::Sgd => param.axpy(-lr, grad),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let slot = self.slots.entry(name.to_string()).or_insert_with(|| Moments {
                    m: Tensor::zeros(grad.rows(), grad.cols()),
                    v: Tensor::zeros(grad.rows(), grad.cols()),
                });
                if slot.m.shape() != grad.shape() {
                    return Err(Error::Shape { node: name.to_string(), detail: "optimizer slot shape changed".into() });
                }
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                let m = slot.m.values_mut();
                let v = slot.v.values_mut();
                for (i, (p, &g)) in param.values_mut().iter_mut().zip(grad.values()).enumerate() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if !param.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}` after update")));
        }
        Ok(())
    }
}
