use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::losses::{task_loss, Labels, LossKind};
use crate::model::{encode, Mlp, MlpGrad, SharedEncoder, TaskPredictor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitBudget {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for FitBudget {
    fn default() -> Self {
        FitBudget { max_iters: 2000, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalFit {
    pub predictor: TaskPredictor,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn head_loss(mlp: &Mlp, z: &Tensor, labels: &Labels, kind: &LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let vars = mlp.bind(&mut tape, false);
    let pred = mlp.apply(&mut tape, &vars, zv)?;
    let loss = task_loss(&mut tape, kind, labels, pred)?;
    Ok(tape.value(loss).item())
}

pub(crate) fn head_loss_and_grad(mlp: &Mlp, z: &Tensor, labels: &Labels, kind: &LossKind) -> Result<(f64, MlpGrad)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let vars = mlp.bind(&mut tape, true);
    let pred = mlp.apply(&mut tape, &vars, zv)?;
    let loss = task_loss(&mut tape, kind, labels, pred)?;
    let grads = tape.backward(loss, &vars.flat())?;
    Ok((tape.value(loss).item(), MlpGrad::from_flat(grads)))
}

/// Full-batch gradient descent with Armijo backtracking on a fixed
/// representation, starting from `init`.
pub fn fit_head(init: &TaskPredictor, z: &Tensor, labels: &Labels, kind: &LossKind, budget: &FitBudget) -> Result<OptimalFit> {
    let mut mlp = init.mlp.clone();
    let (mut f, mut g) = head_loss_and_grad(&mlp, z, labels, kind)?;
    let mut gn = g.norm();
    let mut alpha: f64 = 1.0;
    let mut iterations = 0;
    while iterations < budget.max_iters && gn >= budget.grad_tol {
        let mut accepted = false;
        alpha = (alpha * 2.0).min(1e4);
        while alpha > 1e-20 {
            let cand = mlp.perturbed(-alpha, &g);
            let fc = head_loss(&cand, z, labels, kind)?;
            if fc.is_finite() && fc <= f - 1e-4 * alpha * gn * gn {
                mlp = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        (f, g) = head_loss_and_grad(&mlp, z, labels, kind)?;
        gn = g.norm();
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("optimal predictor loss".into()));
    }
    Ok(OptimalFit {
        predictor: TaskPredictor { mlp, task_id: init.task_id.clone(), trainable: true },
        loss: f,
        grad_norm: gn,
        iterations,
        converged: gn < budget.grad_tol,
    })
}

/// Trains a head for task `task` on the frozen encoder's representation of
/// the whole dataset. The encoder is only read.
pub fn fit_optimal_predictor(
    encoder: &SharedEncoder,
    init: &TaskPredictor,
    dataset: &MultiTaskDataset,
    task: usize,
    budget: &FitBudget,
) -> Result<OptimalFit> {
    let spec = dataset.tasks().get(task).ok_or_else(|| Error::invalid(format!("task index {task} out of range")))?;
    let z = encode(encoder, dataset.inputs())?;
    fit_head(init, &z, &dataset.labels()[task], &spec.loss, budget)
}
