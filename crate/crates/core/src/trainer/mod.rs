//! Minibatch training loop with per-task head updates followed by one
//! encoder update per step.

mod optim;
mod weighting;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerConfig};
pub use weighting::{dwa_weights, LossWeighting, WeightingConfig};

use crate::data::{Batch, MinibatchSampler, MultiTaskDataset};
use crate::dgr::{weighted_objective, DgrConfig};
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpGrad, ModelBundle, ModelConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    pub window: usize,
    pub min_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop { window: 100, min_improvement: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub dgr: DgrConfig,
    pub weighting: WeightingConfig,
    pub early_stop: Option<EarlyStop>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 500,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            dgr: DgrConfig::default(),
            weighting: WeightingConfig::default(),
            early_stop: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if let Some(es) = &self.early_stop {
            if es.window < 1 {
                return Err(Error::config("train.early_stop.window", "must be at least 1"));
            }
            if !(es.min_improvement.is_finite() && es.min_improvement >= 0.0) {
                return Err(Error::config("train.early_stop.min_improvement", "must be >= 0"));
            }
        }
        self.optimizer.validate()?;
        self.weighting.validate()?;
        self.model.validate()?;
        self.dgr.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config { field: format!("train.{field}"), reason },
            other => other,
        })
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub objective: f64,
    pub task_losses: Vec<f64>,
    pub penalties: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub bundle: ModelBundle,
    pub optimizer: Optimizer,
    pub weighting: LossWeighting,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Fresh optimizer state around `bundle`. The learning rate is taken as
    /// given, so a zero rate is allowed here for inspection runs.
    pub fn new(bundle: ModelBundle, config: &TrainConfig) -> Self {
        let k = bundle.num_tasks();
        TrainState {
            step: 0,
            bundle,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            weighting: LossWeighting::new(config.weighting, k),
            history: Vec::new(),
        }
    }
}

fn check_grad(prefix: &str, grad: &MlpGrad) -> Result<()> {
    for (i, (w, b)) in grad.layers.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{prefix}.{i}.weight`")));
        }
        if !b.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{prefix}.{i}.bias`")));
        }
    }
    Ok(())
}

fn apply(opt: &mut Optimizer, prefix: &str, mlp: &mut Mlp, grad: &MlpGrad, t: u64) -> Result<()> {
    for (i, (layer, (gw, gb))) in mlp.layers.iter_mut().zip(&grad.layers).enumerate() {
        opt.step(&format!("{prefix}.{i}.weight"), &mut layer.weight, gw, t)?;
        opt.step(&format!("{prefix}.{i}.bias"), &mut layer.bias, gb, t)?;
    }
    Ok(())
}

/// Evaluates every gradient at the current point, then updates each task
/// head in task order and finally the encoder. Dummies are never touched.
/// Nothing is modified if any gradient is non-finite.
pub fn train_step(state: &mut TrainState, batch: &Batch, dgr: &DgrConfig) -> Result<StepRecord> {
    let weights = state.weighting.weights().to_vec();
    let obj = weighted_objective(&state.bundle, batch, dgr, &weights)?;
    if !obj.value.is_finite() {
        return Err(Error::NonFinite(format!("objective at step {}", state.step)));
    }
    for (k, g) in obj.head_grads.iter().enumerate() {
        check_grad(&format!("head.{k}"), g)?;
    }
    check_grad("encoder", &obj.encoder_grad)?;

    let t = state.step + 1;
    for (k, g) in obj.head_grads.iter().enumerate() {
        apply(&mut state.optimizer, &format!("head.{k}"), &mut state.bundle.predictors[k].mlp, g, t)?;
    }
    apply(&mut state.optimizer, "encoder", &mut state.bundle.encoder.mlp, &obj.encoder_grad, t)?;
    state.step = t;
    let record = StepRecord {
        step: t,
        objective: obj.value,
        task_losses: obj.task_losses,
        penalties: obj.penalties,
        weights,
    };
    state.history.push(record.clone());
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: Vec<StepRecord>,
    pub stopped_early: bool,
}

fn check_dataset(config: &TrainConfig, dataset: &MultiTaskDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::config(
            "train.batch_size",
            format!("{} exceeds the {} training rows", config.batch_size, dataset.len()),
        ));
    }
    Ok(())
}

/// Initializes a bundle from `config.seed` and trains it.
pub fn train(config: &TrainConfig, dataset: &MultiTaskDataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let bundle = ModelBundle::init(
        &config.model,
        dataset.tasks(),
        dataset.input_dim(),
        config.dgr.num_dummies,
        seed::derive(config.seed, 1),
    )?;
    train_from(bundle, config, dataset)
}

/// Runs the step budget from a given starting bundle.
pub fn train_from(bundle: ModelBundle, config: &TrainConfig, dataset: &MultiTaskDataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, dataset)?;
    bundle.validate()?;
    if bundle.num_tasks() != dataset.num_tasks() {
        return Err(Error::invalid(format!(
            "bundle has {} heads but the dataset has {} tasks",
            bundle.num_tasks(),
            dataset.num_tasks()
        )));
    }
    for (k, (head, task)) in bundle.predictors.iter().zip(dataset.tasks()).enumerate() {
        if head.mlp.output_dim() != task.output_dim {
            return Err(Error::invalid(format!("head {k} emits {} values, task `{}` needs {}", head.mlp.output_dim(), task.id, task.output_dim)));
        }
    }
    let mut sampler = MinibatchSampler::new(dataset.len(), config.batch_size, seed::derive(config.seed, 2))?;
    let mut state = TrainState::new(bundle, config);
    let k = dataset.num_tasks();
    let mut epoch_sum = vec![0.0; k];
    let mut epoch_batches = 0usize;
    let mut stopped_early = false;

    while state.step < config.max_steps {
        let idx = sampler.next_batch();
        let batch = dataset.batch(&idx);
        let rec = train_step(&mut state, &batch, &config.dgr)?;
        for (s, l) in epoch_sum.iter_mut().zip(&rec.task_losses) {
            *s += l;
        }
        epoch_batches += 1;
        if sampler.at_epoch_boundary() {
            let means = epoch_sum.iter().map(|s| s / epoch_batches as f64).collect();
            state.weighting.end_epoch(means);
            epoch_sum.iter_mut().for_each(|s| *s = 0.0);
            epoch_batches = 0;
        }
        if let Some(es) = &config.early_stop {
            if plateaued(&state.history, es) {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { bundle: state.bundle, history: state.history, stopped_early })
}

/// True once the mean objective of the latest window improves on the window
/// before it by less than `min_improvement`.
fn plateaued(history: &[StepRecord], es: &EarlyStop) -> bool {
    let w = es.window;
    if history.len() < 2 * w {
        return false;
    }
    let n = history.len();
    let mean = |r: &[StepRecord]| r.iter().map(|s| s.objective).sum::<f64>() / w as f64;
    let prev = mean(&history[n - 2 * w..n - w]);
    let last = mean(&history[n - w..]);
    prev - last < es.min_improvement
}

/// One JSON object per line.
pub fn write_history<W: Write>(history: &[StepRecord], mut out: W) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_history_file(history: &[StepRecord], path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_history(history, f)
}

pub fn read_history<R: BufRead>(input: R) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
