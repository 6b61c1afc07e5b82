//! Task losses and prediction metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy { num_classes: usize },
    MeanSquaredError,
}

impl LossKind {
    pub fn num_classes(&self) -> Option<usize> {
        match *self {
            LossKind::SoftmaxCrossEntropy { num_classes } => Some(num_classes),
            LossKind::MeanSquaredError => None,
        }
    }
}

/// Whether larger metric values are better. Its indicator is the sign
/// exponent used by the relative-improvement score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    HigherIsBetter,
    LowerIsBetter,
}

impl Direction {
    pub fn indicator(self) -> u8 {
        match self {
            Direction::HigherIsBetter => 0,
            Direction::LowerIsBetter => 1,
        }
    }

    pub fn from_indicator(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Direction::HigherIsBetter),
            1 => Ok(Direction::LowerIsBetter),
            _ => Err(Error::invalid(format!("direction indicator must be 0 or 1, got {i}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub loss: LossKind,
    pub output_dim: usize,
    pub direction: Direction,
}

impl TaskSpec {
    /// Accuracy-scored classification task.
    pub fn classification(id: impl Into<String>, num_classes: usize) -> Self {
        TaskSpec {
            id: id.into(),
            loss: LossKind::SoftmaxCrossEntropy { num_classes },
            output_dim: num_classes,
            direction: Direction::HigherIsBetter,
        }
    }

    /// Scalar regression scored by absolute error.
    pub fn regression(id: impl Into<String>) -> Self {
        TaskSpec { id: id.into(), loss: LossKind::MeanSquaredError, output_dim: 1, direction: Direction::LowerIsBetter }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::invalid(format!("task `{}`: output_dim must be positive", self.id)));
        }
        if let LossKind::SoftmaxCrossEntropy { num_classes } = self.loss {
            if num_classes < 2 {
                return Err(Error::invalid(format!("task `{}`: needs at least two classes", self.id)));
            }
            if num_classes != self.output_dim {
                return Err(Error::invalid(format!(
                    "task `{}`: output_dim {} differs from class count {num_classes}",
                    self.id, self.output_dim
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth for one task over a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Values(v) => Labels::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }

    fn check(&self, kind: &LossKind, rows: usize, cols: usize) -> Result<()> {
        if self.len() != rows {
            return Err(Error::Shape {
                node: "task loss".into(),
                detail: format!("{} labels for {rows} predictions", self.len()),
            });
        }
        match (kind, self) {
            (LossKind::SoftmaxCrossEntropy { num_classes }, Labels::Classes(c)) => {
                if cols != *num_classes {
                    return Err(Error::Shape {
                        node: "task loss".into(),
                        detail: format!("{cols} logits for {num_classes} classes"),
                    });
                }
                if let Some(&bad) = c.iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::LabelOutOfRange { label: bad, num_classes: *num_classes });
                }
                Ok(())
            }
            (LossKind::MeanSquaredError, Labels::Values(_)) => {
                if cols != 1 {
                    return Err(Error::Shape {
                        node: "task loss".into(),
                        detail: format!("scalar targets need one output column, found {cols}"),
                    });
                }
                Ok(())
            }
            _ => Err(Error::invalid("label type does not match the loss kind")),
        }
    }
}

/// Records the batch-mean loss of `pred` on `tape`.
pub fn task_loss(tape: &mut Tape, kind: &LossKind, labels: &Labels, pred: Var) -> Result<Var> {
    let [rows, cols] = tape.value(pred).shape();
    labels.check(kind, rows, cols)?;
    match labels {
        Labels::Classes(c) => tape.softmax_cross_entropy(pred, c),
        Labels::Values(v) => {
            let target = tape.constant(Tensor::from_raw(v.len(), 1, v.clone()));
            tape.squared_error(pred, target)
        }
    }
}

/// Loss value without gradient tracking.
pub fn loss_value(kind: &LossKind, labels: &Labels, pred: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = task_loss(&mut tape, kind, labels, p)?;
    Ok(tape.value(l).item())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy for classification, mean absolute error for regression.
pub fn task_metric(spec: &TaskSpec, labels: &Labels, pred: &Tensor) -> Result<f64> {
    labels.check(&spec.loss, pred.rows(), pred.cols())?;
    let n = pred.rows() as f64;
    Ok(match labels {
        Labels::Classes(c) => {
            let hits = c.iter().enumerate().filter(|&(r, &l)| argmax(pred.row_slice(r)) == l).count();
            hits as f64 / n
        }
        Labels::Values(v) => v.iter().enumerate().map(|(r, &y)| (pred.get(r, 0) - y).abs()).sum::<f64>() / n,
    })
}
