//! Dummy gradient-norm penalty and its encoder-side gradient.
//!
//! For task `k` the penalty is the mean over the task's frozen dummy heads of
//! `||d L_k / d theta_dummy||_F`, evaluated on the same minibatch as `L_k`.
//! It reaches the encoder only through the representation `z`, so every
//! encoder gradient here is computed as a cotangent on `z` and pulled back
//! through the encoder with a single vector-Jacobian product.
//!
//! The default path estimates the mixed second derivative with a central
//! difference along the dummy gradient `g`: the dummy parameters are moved
//! to `theta +- eps * g` and
//!
//! ```text
//! grad_z ||g|| ~ [grad_z L(theta + eps g) - grad_z L(theta - eps g)] / (2 eps ||g||)
//! ```
//!
//! With the relative rule `eps = c / ||g||` the perturbation has length `c`
//! whatever the gradient scale. Setting `exact_second_order` differentiates
//! through the backward pass instead.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_of_grad_norm_exact, smoothed_norm, Tape, NORM_EPSILON};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{task_loss, Labels, LossKind};
use crate::model::{Mlp, MlpGrad, ModelBundle, SharedEncoder, TaskPredictor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdStep {
    /// `eps = c / ||g||`
    Relative(f64),
    Absolute(f64),
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep::Relative(0.01)
    }
}

impl FdStep {
    pub fn epsilon(self, grad_norm: f64) -> f64 {
        match self {
            FdStep::Relative(c) => c / grad_norm,
            FdStep::Absolute(e) => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgrConfig {
    pub lambda: f64,
    pub num_dummies: usize,
    pub fd_step: FdStep,
    pub exact_second_order: bool,
}

impl Default for DgrConfig {
    fn default() -> Self {
        DgrConfig { lambda: 1e-6, num_dummies: 3, fd_step: FdStep::default(), exact_second_order: false }
    }
}

impl DgrConfig {
    /// Penalty-free configuration.
    pub fn vanilla() -> Self {
        DgrConfig { lambda: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("dgr.lambda", format!("must be a finite value >= 0, got {}", self.lambda)));
        }
        if self.num_dummies < 1 {
            return Err(Error::config("dgr.num_dummies", "must be at least 1"));
        }
        let (FdStep::Relative(s) | FdStep::Absolute(s)) = self.fd_step;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::config("dgr.fd_step", format!("step must be a finite value > 0, got {s}")));
        }
        Ok(())
    }
}

struct DummyPass {
    loss: f64,
    grads: MlpGrad,
    z_grad: Tensor,
}

/// Loss of `mlp` on the fixed representation `z`, with gradients for the
/// head parameters and for `z`.
fn dummy_pass(mlp: &Mlp, z: &Tensor, labels: &Labels, kind: &LossKind) -> Result<DummyPass> {
    let mut tape = Tape::new();
    let zv = tape.param(z.clone());
    let vars = mlp.bind(&mut tape, true);
    let pred = mlp.apply(&mut tape, &vars, zv)?;
    let loss = task_loss(&mut tape, kind, labels, pred)?;
    let mut wrt = vars.flat();
    wrt.push(zv);
    let mut grads = tape.backward(loss, &wrt)?;
    let z_grad = grads.pop().expect("z gradient");
    Ok(DummyPass { loss: tape.value(loss).item(), grads: MlpGrad::from_flat(grads), z_grad })
}

fn check_dummy(dummy: &TaskPredictor) -> Result<()> {
    if dummy.trainable {
        return Err(Error::invalid(format!("predictor for `{}` is trainable, not a dummy", dummy.task_id)));
    }
    Ok(())
}

/// Smoothed `||d L / d theta_dummy||_F` for one dummy head.
pub fn dummy_grad_norm(dummy: &TaskPredictor, z: &Tensor, labels: &Labels, kind: &LossKind) -> Result<f64> {
    check_dummy(dummy)?;
    let pass = dummy_pass(&dummy.mlp, z, labels, kind)?;
    Ok(smoothed_norm(pass.grads.tensors()))
}

/// Mean of [`dummy_grad_norm`] over the dummies.
pub fn penalty(dummies: &[TaskPredictor], z: &Tensor, labels: &Labels, kind: &LossKind) -> Result<f64> {
    if dummies.is_empty() {
        return Err(Error::invalid("penalty needs at least one dummy"));
    }
    let mut total = 0.0;
    for d in dummies {
        total += dummy_grad_norm(d, z, labels, kind)?;
    }
    Ok(total / dummies.len() as f64)
}

/// Penalty value and its gradient with respect to `z`.
#[derive(Debug, Clone)]
pub struct PenaltyCotangent {
    pub penalty: f64,
    pub z_grad: Tensor,
}

/// `d ||g|| / d z` for one dummy by central differences along `g`.
fn fd_z_grad(dummy: &Mlp, z: &Tensor, labels: &Labels, kind: &LossKind, step: FdStep) -> Result<(f64, Tensor)> {
    let at = dummy_pass(dummy, z, labels, kind)?;
    let norm = smoothed_norm(at.grads.tensors());
    let raw: f64 = at.grads.tensors().map(Tensor::sum_squares).sum();
    if raw == 0.0 {
        return Ok((norm, Tensor::zeros(z.rows(), z.cols())));
    }
    let eps = step.epsilon(norm);
    let plus = dummy_pass(&dummy.perturbed(eps, &at.grads), z, labels, kind)?;
    let minus = dummy_pass(&dummy.perturbed(-eps, &at.grads), z, labels, kind)?;
    if plus.loss == minus.loss {
        return Err(Error::DegenerateStep { epsilon: eps });
    }
    let denom = 2.0 * eps * norm;
    let grad = plus.z_grad.zip_map(&minus.z_grad, |p, m| (p - m) / denom);
    Ok((norm, grad))
}

/// `d ||g|| / d z` for one dummy by differentiating through backward.
fn exact_z_grad(dummy: &Mlp, z: &Tensor, labels: &Labels, kind: &LossKind) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let zv = tape.param(z.clone());
    let vars = dummy.bind(&mut tape, true);
    let pred = dummy.apply(&mut tape, &vars, zv)?;
    let loss = task_loss(&mut tape, kind, labels, pred)?;
    match grad_of_grad_norm_exact(&mut tape, loss, &vars.flat(), &[zv]) {
        Ok(mut r) => Ok((r.norm, r.grads.pop().expect("z gradient"))),
        // The smoothed norm is flat at g = 0.
        Err(Error::ZeroGradientNorm) => Ok((NORM_EPSILON.sqrt(), Tensor::zeros(z.rows(), z.cols()))),
        Err(e) => Err(e),
    }
}

/// Penalty of one task and its gradient with respect to `z`, both averaged
/// over the dummies.
pub fn penalty_cotangent(
    dummies: &[TaskPredictor],
    z: &Tensor,
    labels: &Labels,
    kind: &LossKind,
    config: &DgrConfig,
) -> Result<PenaltyCotangent> {
    if dummies.is_empty() {
        return Err(Error::invalid("penalty needs at least one dummy"));
    }
    let d = dummies.len() as f64;
    let mut penalty = 0.0;
    let mut z_grad = Tensor::zeros(z.rows(), z.cols());
    for dummy in dummies {
        check_dummy(dummy)?;
        let (norm, g) = if config.exact_second_order {
            exact_z_grad(&dummy.mlp, z, labels, kind)?
        } else {
            fd_z_grad(&dummy.mlp, z, labels, kind, config.fd_step)?
        };
        penalty += norm;
        z_grad.axpy(1.0 / d, &g);
    }
    if !z_grad.is_finite() {
        return Err(Error::NonFinite("penalty gradient".into()));
    }
    Ok(PenaltyCotangent { penalty: penalty / d, z_grad })
}

/// Pulls a cotangent on the encoder output back to the encoder parameters.
pub fn encoder_vjp(encoder: &SharedEncoder, x: &Tensor, cotangent: &Tensor) -> Result<MlpGrad> {
    let mut tape = Tape::new();
    let vars = encoder.mlp.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let z = encoder.mlp.apply(&mut tape, &vars, xv)?;
    let c = tape.constant(cotangent.clone());
    let prod = tape.mul(z, c)?;
    let s = tape.sum(prod)?;
    Ok(MlpGrad::from_flat(tape.backward(s, &vars.flat())?))
}

/// Gradient of task `task`'s penalty with respect to the encoder parameters.
pub fn encoder_penalty_grad(bundle: &ModelBundle, task: usize, batch: &Batch, config: &DgrConfig) -> Result<MlpGrad> {
    if task >= bundle.num_tasks() {
        return Err(Error::invalid(format!("task index {task} out of range")));
    }
    let z = bundle.encoder.mlp.forward(&batch.x)?;
    let kind = &bundle_kind(bundle, task, batch)?;
    let pc = penalty_cotangent(&bundle.dummies[task], &z, &batch.labels[task], kind, config)?;
    encoder_vjp(&bundle.encoder, &batch.x, &pc.z_grad)
}

fn bundle_kind(bundle: &ModelBundle, task: usize, batch: &Batch) -> Result<LossKind> {
    let out = bundle.predictors[task].mlp.output_dim();
    Ok(match &batch.labels[task] {
        Labels::Classes(_) => LossKind::SoftmaxCrossEntropy { num_classes: out },
        Labels::Values(_) => LossKind::MeanSquaredError,
    })
}

/// Value and gradients of the regularized multi-task objective.
#[derive(Debug, Clone)]
pub struct Objective {
    /// `sum_k w_k L_k + lambda * sum_k penalty_k`
    pub value: f64,
    pub task_losses: Vec<f64>,
    pub penalties: Vec<f64>,
    pub encoder_grad: MlpGrad,
    /// Gradients of the weighted task losses only.
    pub head_grads: Vec<MlpGrad>,
}

/// [`weighted_objective`] with unit task weights.
pub fn objective(bundle: &ModelBundle, batch: &Batch, config: &DgrConfig) -> Result<Objective> {
    weighted_objective(bundle, batch, config, &vec![1.0; bundle.num_tasks()])
}

/// One forward pass through the encoder and every head; penalties use the
/// same minibatch. With `lambda = 0` the penalties are still reported but
/// contribute nothing to any gradient.
pub fn weighted_objective(bundle: &ModelBundle, batch: &Batch, config: &DgrConfig, weights: &[f64]) -> Result<Objective> {
    config.validate()?;
    let k = bundle.num_tasks();
    if batch.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    if batch.labels.len() != k || weights.len() != k {
        return Err(Error::invalid(format!(
            "{k} tasks but {} label columns and {} weights",
            batch.labels.len(),
            weights.len()
        )));
    }

    let mut tape = Tape::new();
    let enc_vars = bundle.encoder.mlp.bind(&mut tape, true);
    let xv = tape.constant(batch.x.clone());
    let z = bundle.encoder.mlp.apply(&mut tape, &enc_vars, xv)?;

    let mut kinds = Vec::with_capacity(k);
    let mut head_vars = Vec::with_capacity(k);
    let mut losses = Vec::with_capacity(k);
    let mut total = None;
    for t in 0..k {
        let head = &bundle.predictors[t];
        let kind = bundle_kind(bundle, t, batch)?;
        let vars = head.mlp.bind(&mut tape, true);
        let pred = head.mlp.apply(&mut tape, &vars, z)?;
        let loss = task_loss(&mut tape, &kind, &batch.labels[t], pred)?;
        losses.push(tape.value(loss).item());
        let term = if weights[t] == 1.0 { loss } else { tape.scale(loss, weights[t])? };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        kinds.push(kind);
        head_vars.push(vars);
    }
    let mut total = total.expect("at least one task");

    let z_value = tape.value(z).clone();
    let with_grad = config.lambda > 0.0;
    let cotangents: Vec<PenaltyCotangent> = (0..k)
        .into_par_iter()
        .map(|t| {
            if with_grad {
                penalty_cotangent(&bundle.dummies[t], &z_value, &batch.labels[t], &kinds[t], config)
            } else {
                let p = penalty(&bundle.dummies[t], &z_value, &batch.labels[t], &kinds[t])?;
                Ok(PenaltyCotangent { penalty: p, z_grad: Tensor::zeros(1, 1) })
            }
        })
        .collect::<Result<_>>()?;
    let penalties: Vec<f64> = cotangents.iter().map(|c| c.penalty).collect();

    if with_grad {
        let mut c = Tensor::zeros(z_value.rows(), z_value.cols());
        for pc in &cotangents {
            c.axpy(config.lambda, &pc.z_grad);
        }
        let cv = tape.constant(c);
        let prod = tape.mul(z, cv)?;
        let pull = tape.sum(prod)?;
        total = tape.add(total, pull)?;
    }

    let mut wrt = enc_vars.flat();
    for v in &head_vars {
        wrt.extend(v.flat());
    }
    let mut grads = tape.backward(total, &wrt)?.into_iter();
    let enc_n = enc_vars.layers.len() * 2;
    let encoder_grad = MlpGrad::from_flat(grads.by_ref().take(enc_n).collect());
    let head_grads = head_vars.iter().map(|v| MlpGrad::from_flat(grads.by_ref().take(v.layers.len() * 2).collect())).collect();

    let weighted: f64 = losses.iter().zip(weights).map(|(l, w)| w * l).sum();
    let value = weighted + config.lambda * penalties.iter().sum::<f64>();
    Ok(Objective { value, task_losses: losses, penalties, encoder_grad, head_grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::TaskSpec;
    use crate::model::{Activation, LayerParams, ModelConfig};

    fn linear_dummy(w: f64, b: f64) -> TaskPredictor {
        TaskPredictor {
            mlp: Mlp::new(vec![LayerParams {
                weight: Tensor::scalar(w),
                bias: Tensor::scalar(b),
                activation: Activation::Identity,
            }])
            .unwrap(),
            task_id: "t".into(),
            trainable: false,
        }
    }

    #[test]
    fn hand_gradient_norm_with_bias() {
        // d/dw = -2(y - wz - b) z = -2 and d/db = -2, so the norm is 2 sqrt 2.
        let n = dummy_grad_norm(&linear_dummy(0.0, 0.0), &Tensor::scalar(1.0), &Labels::Values(vec![1.0]), &LossKind::MeanSquaredError)
            .unwrap();
        assert!((n - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_dummy_has_smoothing_floor_norm() {
        let n = dummy_grad_norm(&linear_dummy(2.0, 0.5), &Tensor::scalar(1.0), &Labels::Values(vec![2.5]), &LossKind::MeanSquaredError)
            .unwrap();
        assert!((n - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn trainable_head_is_not_a_dummy() {
        let mut d = linear_dummy(0.0, 0.0);
        d.trainable = true;
        assert!(dummy_grad_norm(&d, &Tensor::scalar(1.0), &Labels::Values(vec![1.0]), &LossKind::MeanSquaredError).is_err());
    }

    #[test]
    fn penalty_single_dummy_equals_its_norm() {
        let d = linear_dummy(0.3, -0.1);
        let z = Tensor::new(2, 1, vec![0.5, -1.0]).unwrap();
        let y = Labels::Values(vec![1.0, 0.0]);
        let a = penalty(std::slice::from_ref(&d), &z, &y, &LossKind::MeanSquaredError).unwrap();
        let b = dummy_grad_norm(&d, &z, &y, &LossKind::MeanSquaredError).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(DgrConfig::default().validate().is_ok());
        assert!(DgrConfig { lambda: -1.0, ..Default::default() }.validate().unwrap_err().is_config_error());
        assert!(DgrConfig { num_dummies: 0, ..Default::default() }.validate().is_err());
        assert!(DgrConfig { fd_step: FdStep::Relative(0.0), ..Default::default() }.validate().is_err());
        assert!(DgrConfig { fd_step: FdStep::Absolute(f64::NAN), ..Default::default() }.validate().is_err());
    }

    fn small_bundle(seed: u64) -> (ModelBundle, Batch) {
        let cfg = ModelConfig { encoder_hidden: vec![5], rep_dim: 4, head_hidden: vec![], activation: Activation::Tanh };
        let tasks = [TaskSpec::classification("c", 3), TaskSpec::regression("r")];
        let bundle = ModelBundle::init(&cfg, &tasks, 3, 3, seed).unwrap();
        let x = Tensor::new(6, 3, (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let batch = Batch {
            x,
            labels: vec![Labels::Classes(vec![0, 1, 2, 2, 1, 0]), Labels::Values(vec![0.5, -0.2, 1.0, 0.0, 0.3, -1.0])],
        };
        (bundle, batch)
    }

    #[test]
    fn head_grads_ignore_penalty() {
        let (bundle, batch) = small_bundle(1);
        let plain = objective(&bundle, &batch, &DgrConfig::vanilla()).unwrap();
        let reg = objective(&bundle, &batch, &DgrConfig { lambda: 0.5, ..Default::default() }).unwrap();
        assert_eq!(plain.head_grads, reg.head_grads);
        assert_eq!(plain.penalties, reg.penalties);
        assert_ne!(plain.encoder_grad, reg.encoder_grad);
    }

    #[test]
    fn fd_and_exact_agree_on_small_bundle() {
        let (bundle, batch) = small_bundle(2);
        for task in 0..2 {
            let fd = encoder_penalty_grad(&bundle, task, &batch, &DgrConfig::default()).unwrap().flatten();
            let exact = encoder_penalty_grad(&bundle, task, &batch, &DgrConfig { exact_second_order: true, ..Default::default() })
                .unwrap()
                .flatten();
            let err: f64 = fd.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-3 * scale, "task {task}: {err} vs {scale}");
        }
    }

    #[test]
    fn objective_value_recomposes() {
        let (bundle, batch) = small_bundle(3);
        let cfg = DgrConfig { lambda: 1e-6, ..Default::default() };
        let o = objective(&bundle, &batch, &cfg).unwrap();
        let sum_l: f64 = o.task_losses.iter().sum();
        let sum_p: f64 = o.penalties.iter().sum();
        assert!((o.value - (sum_l + 1e-6 * sum_p)).abs() < 1e-15);
    }
}
