//! Universality of a representation for one task: how close an arbitrary
//! frozen head comes to a fitted one.
//!
//! Losses are batch means rather than sums, which rescales `U` by `n` in
//! difference mode and `n^2` in product mode but keeps it comparable across
//! dataset sizes.

use serde::{Deserialize, Serialize};

use super::permutation::min_permutation_loss;
use crate::data::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::losses::{loss_value, Labels, TaskSpec};
use crate::model::{encode, SharedEncoder, TaskPredictor};
use crate::tensor::Tensor;

pub const UNIVERSALITY_EPSILON: f64 = 1e-12;

/// Gaps at or below this are reported as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniversalityMode {
    /// `1 / (dummy * optimal + eps)`
    #[default]
    Product,
    /// `1 / (dummy - optimal + eps)`
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalityReport {
    pub task_id: String,
    pub mode: UniversalityMode,
    pub dummy_loss_min_perm: f64,
    /// Class relabeling achieving the dummy loss; identity for regression.
    pub permutation: Vec<usize>,
    pub optimal_loss: f64,
    /// Product or difference of the two losses, before the floor.
    pub raw: f64,
    pub u: f64,
    pub degenerate: bool,
    /// Set in difference mode when the dummy beats the fitted head.
    pub dummy_below_optimal: bool,
}

/// Universality computed from a representation `z` already in hand.
pub fn universality_on(
    z: &Tensor,
    dummy: &TaskPredictor,
    optimal: &TaskPredictor,
    labels: &Labels,
    spec: &TaskSpec,
    mode: UniversalityMode,
) -> Result<UniversalityReport> {
    let dummy_out = dummy.mlp.forward(z)?;
    let (dummy_loss, permutation) = match (labels, spec.loss.num_classes()) {
        (Labels::Classes(c), Some(nc)) => {
            let r = min_permutation_loss(&dummy_out, c, nc)?;
            (r.loss, r.sigma)
        }
        (Labels::Values(_), None) => (loss_value(&spec.loss, labels, &dummy_out)?, vec![0]),
        _ => return Err(Error::invalid(format!("task `{}`: labels do not match the loss", spec.id))),
    };
    let optimal_loss = loss_value(&spec.loss, labels, &optimal.mlp.forward(z)?)?;
    let raw = match mode {
        UniversalityMode::Product => dummy_loss * optimal_loss,
        UniversalityMode::Difference => dummy_loss - optimal_loss,
    };
    let u = 1.0 / (raw.max(0.0) + UNIVERSALITY_EPSILON);
    Ok(UniversalityReport {
        task_id: spec.id.clone(),
        mode,
        dummy_loss_min_perm: dummy_loss,
        permutation,
        optimal_loss,
        raw,
        u,
        degenerate: raw <= DEGENERATE_GAP,
        dummy_below_optimal: mode == UniversalityMode::Difference && raw < 0.0,
    })
}

pub fn universality(
    encoder: &SharedEncoder,
    dummy: &TaskPredictor,
    optimal: &TaskPredictor,
    dataset: &MultiTaskDataset,
    task: usize,
    mode: UniversalityMode,
) -> Result<UniversalityReport> {
    let spec = dataset.tasks().get(task).ok_or_else(|| Error::invalid(format!("task index {task} out of range")))?;
    let z = encode(encoder, dataset.inputs())?;
    universality_on(&z, dummy, optimal, &dataset.labels()[task], spec, mode)
}
