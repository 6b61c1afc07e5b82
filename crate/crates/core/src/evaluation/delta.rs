use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaMtlInput {
    pub baseline: f64,
    pub multitask: f64,
    pub direction: Direction,
}

impl DeltaMtlInput {
    pub fn new(baseline: f64, multitask: f64, direction: Direction) -> Self {
        DeltaMtlInput { baseline, multitask, direction }
    }
}

/// Mean signed relative change over single-task baselines, in percent.
/// Lower-is-better metrics count a decrease as an improvement.
pub fn delta_mtl(inputs: &[DeltaMtlInput]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::invalid("delta_mtl needs at least one task"));
    }
    let mut total = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        if t.baseline == 0.0 || !t.baseline.is_finite() || !t.multitask.is_finite() {
            return Err(Error::invalid(format!("task {k}: baseline must be finite and nonzero")));
        }
        let sign = if t.direction.indicator() == 1 { -1.0 } else { 1.0 };
        total += sign * (t.multitask - t.baseline) / t.baseline;
    }
    Ok(100.0 * total / inputs.len() as f64)
}
