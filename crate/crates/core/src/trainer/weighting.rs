//! Per-task loss weights, refreshed once per epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightingConfig {
    #[default]
    Equal,
    /// Dynamic weight average: `w_k = K softmax_k(r_k / T)` where `r_k` is
    /// the ratio of the task's mean loss over the last two epochs. The first
    /// two epochs use unit weights.
    Dwa {
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

fn default_temperature() -> f64 {
    2.0
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if let WeightingConfig::Dwa { temperature } = *self {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::config("train.weighting.temperature", format!("must be > 0, got {temperature}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeighting {
    config: WeightingConfig,
    weights: Vec<f64>,
    /// Mean task losses of completed epochs, newest last (at most two kept).
    epoch_means: Vec<Vec<f64>>,
}

impl LossWeighting {
    pub fn new(config: WeightingConfig, num_tasks: usize) -> Self {
        LossWeighting { config, weights: vec![1.0; num_tasks], epoch_means: Vec::new() }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Records an epoch's mean task losses and recomputes the weights.
    pub fn end_epoch(&mut self, mean_losses: Vec<f64>) {
        self.epoch_means.push(mean_losses);
        if self.epoch_means.len() > 2 {
            self.epoch_means.remove(0);
        }
        if let WeightingConfig::Dwa { temperature } = self.config {
            if let [prev, last] = &self.epoch_means[..] {
                self.weights = dwa_weights(last, prev, temperature);
            }
        }
    }
}

/// `K exp(r_k / T) / sum_i exp(r_i / T)` with `r_k = last_k / prev_k`.
pub fn dwa_weights(last: &[f64], prev: &[f64], temperature: f64) -> Vec<f64> {
    let k = last.len() as f64;
    let r: Vec<f64> = last.iter().zip(prev).map(|(l, p)| if *p > 0.0 { l / p } else { 1.0 }).collect();
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| k * v / z).collect()
}
