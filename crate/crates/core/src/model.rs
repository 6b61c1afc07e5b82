//! Hard-parameter-sharing model: a shared encoder, one trainable predictor
//! per task, and a set of frozen dummy predictors per task.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::TaskSpec;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `out x in`
    pub weight: Tensor,
    /// `1 x out`
    pub bias: Tensor,
    pub activation: Activation,
}

impl LayerParams {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Draws an MLP with `dims[0]` inputs and `dims.last()` outputs. Weights are
/// uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero. Hidden layers
/// use `hidden`, the last layer `output`.
pub fn init_mlp(dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Vec<LayerParams>> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!("an MLP needs at least two layer widths, got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("layer widths must be positive, got {dims:?}")));
    }
    let mut rng = seed::rng(seed);
    let last = dims.len() - 2;
    Ok(dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            LayerParams {
                weight: Tensor::from_raw(fan_out, fan_in, values),
                bias: Tensor::zeros(1, fan_out),
                activation: if i == last { output } else { hidden },
            }
        })
        .collect())
}

/// Tape handles for one MLP's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn flat(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Gradient (or any same-shaped quantity) for an MLP, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpGrad {
    pub fn zeros_like(layers: &[LayerParams]) -> Self {
        MlpGrad {
            layers: layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight.rows(), l.weight.cols()),
                        Tensor::zeros(1, l.bias.cols()),
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds from the flat `[w0, b0, w1, b1, ...]` order of [`MlpVars::flat`].
    pub fn from_flat(flat: Vec<Tensor>) -> Self {
        let mut it = flat.into_iter();
        let mut layers = Vec::new();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            layers.push((w, b));
        }
        MlpGrad { layers }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn axpy(&mut self, alpha: f64, other: &MlpGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.axpy(alpha, ow);
            b.axpy(alpha, ob);
        }
    }

    pub fn scale(&self, c: f64) -> MlpGrad {
        MlpGrad { layers: self.layers.iter().map(|(w, b)| (w.scale(c), b.scale(c))).collect() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }
}

/// A plain feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LayerParams>,
}

impl Mlp {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        let mlp = Mlp { layers };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.rows() != 1 || l.bias.cols() != l.output_dim() {
                return Err(Error::invalid(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
            if i > 0 && l.input_dim() != self.layers[i - 1].output_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.input_dim(),
                    i - 1,
                    self.layers[i - 1].output_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// `(out, in, activation)` per layer.
    pub fn signature(&self) -> Vec<(usize, usize, Activation)> {
        self.layers.iter().map(|l| (l.output_dim(), l.input_dim(), l.activation)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Places the parameters on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let leaf = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        MlpVars {
            layers: self.layers.iter().map(|l| (leaf(tape, &l.weight), leaf(tape, &l.bias))).collect(),
        }
    }

    /// Records `act(x W^T + b)` for every layer.
    pub fn apply(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input_dim() {
            return Err(Error::Shape {
                node: "mlp input".into(),
                detail: format!("expected width {}, found {width}", self.input_dim()),
            });
        }
        let mut h = x;
        for (layer, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            let wt = tape.transpose(w)?;
            let lin = tape.matmul(h, wt)?;
            let pre = tape.add_row(lin, b)?;
            h = match layer.activation {
                Activation::Relu => tape.relu(pre)?,
                Activation::Tanh => tape.tanh(pre)?,
                Activation::Identity => pre,
            };
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.apply(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Adds `alpha * delta` to every parameter.
    pub fn perturbed(&self, alpha: f64, delta: &MlpGrad) -> Mlp {
        let mut out = self.clone();
        for (l, (dw, db)) in out.layers.iter_mut().zip(&delta.layers) {
            l.weight.axpy(alpha, dw);
            l.bias.axpy(alpha, db);
        }
        out
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedEncoder {
    pub mlp: Mlp,
}

impl SharedEncoder {
    pub fn new(mlp: Mlp) -> Self {
        SharedEncoder { mlp }
    }

    pub fn rep_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPredictor {
    pub mlp: Mlp,
    pub task_id: String,
    pub trainable: bool,
}

/// Maps inputs to the shared representation `z`.
pub fn encode(encoder: &SharedEncoder, x: &Tensor) -> Result<Tensor> {
    encoder.mlp.forward(x)
}

pub fn predict(predictor: &TaskPredictor, z: &Tensor) -> Result<Tensor> {
    predictor.mlp.forward(z)
}

/// `d` frozen predictors with the template's architecture, each drawn from
/// its own seed.
pub fn spawn_dummies(template: &TaskPredictor, d: usize, seed: u64) -> Result<Vec<TaskPredictor>> {
    if d < 1 {
        return Err(Error::invalid("at least one dummy predictor is required"));
    }
    let sig = template.mlp.signature();
    let mut dims = vec![sig[0].1];
    dims.extend(sig.iter().map(|s| s.0));
    (0..d)
        .map(|j| {
            let mut layers = init_mlp(&dims, Activation::Identity, Activation::Identity, seed::derive(seed, j as u64))?;
            for (l, s) in layers.iter_mut().zip(&sig) {
                l.activation = s.2;
            }
            Ok(TaskPredictor { mlp: Mlp { layers }, task_id: template.task_id.clone(), trainable: false })
        })
        .collect()
}

/// Layer widths and activations for a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub rep_dim: usize,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder_hidden: vec![64], rep_dim: 32, head_hidden: vec![16], activation: Activation::Relu }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rep_dim == 0 {
            return Err(Error::config("model.rep_dim", "must be positive"));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::config("model.encoder_hidden", "widths must be positive"));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::config("model.head_hidden", "widths must be positive"));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(self.rep_dim);
        dims
    }

    pub fn head_dims(&self, output_dim: usize) -> Vec<usize> {
        let mut dims = vec![self.rep_dim];
        dims.extend(&self.head_hidden);
        dims.push(output_dim);
        dims
    }

    pub fn init_encoder(&self, input_dim: usize, seed: u64) -> Result<SharedEncoder> {
        let layers = init_mlp(&self.encoder_dims(input_dim), self.activation, self.activation, seed)?;
        Ok(SharedEncoder::new(Mlp { layers }))
    }

    pub fn init_head(&self, task: &TaskSpec, seed: u64) -> Result<TaskPredictor> {
        let layers = init_mlp(&self.head_dims(task.output_dim), self.activation, Activation::Identity, seed)?;
        Ok(TaskPredictor { mlp: Mlp { layers }, task_id: task.id.clone(), trainable: true })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub encoder: SharedEncoder,
    pub predictors: Vec<TaskPredictor>,
    /// `dummies[k]` holds the frozen predictors of task `k`.
    pub dummies: Vec<Vec<TaskPredictor>>,
}

impl ModelBundle {
    pub fn init(config: &ModelConfig, tasks: &[TaskSpec], input_dim: usize, num_dummies: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::invalid("a bundle needs at least one task"));
        }
        let encoder = config.init_encoder(input_dim, seed::derive(seed, 0))?;
        let mut predictors = Vec::with_capacity(tasks.len());
        let mut dummies = Vec::with_capacity(tasks.len());
        for (k, task) in tasks.iter().enumerate() {
            let head = config.init_head(task, seed::derive(seed, 100 + k as u64))?;
            dummies.push(spawn_dummies(&head, num_dummies, seed::derive(seed, 200 + k as u64))?);
            predictors.push(head);
        }
        Ok(ModelBundle { encoder, predictors, dummies })
    }

    pub fn num_tasks(&self) -> usize {
        self.predictors.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.mlp.validate()?;
        if self.dummies.len() != self.predictors.len() {
            return Err(Error::invalid("one dummy set per task is required"));
        }
        for (k, (head, dummies)) in self.predictors.iter().zip(&self.dummies).enumerate() {
            head.mlp.validate()?;
            if head.mlp.input_dim() != self.encoder.rep_dim() {
                return Err(Error::invalid(format!("predictor {k} does not read the representation width")));
            }
            if dummies.is_empty() {
                return Err(Error::invalid(format!("task {k} has no dummy predictors")));
            }
            let sig = head.mlp.signature();
            for d in dummies {
                d.mlp.validate()?;
                if d.trainable || d.mlp.signature() != sig {
                    return Err(Error::invalid(format!("task {k}: dummy does not mirror its predictor")));
                }
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every dummy parameter.
    pub fn dummy_checksum(&self) -> u64 {
        checksum(self.dummies.iter().flatten().flat_map(|d| d.mlp.parameters()))
    }

    pub fn encoder_checksum(&self) -> u64 {
        checksum(self.encoder.mlp.parameters())
    }
}

pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for v in t.values() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

const CHECKPOINT_FORMAT: &str = "dgr-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    bundle: ModelBundle,
}

/// Writes every shape and parameter as JSON; floats round-trip exactly.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint { format: CHECKPOINT_FORMAT.into(), bundle: bundle.clone() })?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid(format!("unsupported checkpoint format `{}`", ckpt.format)));
    }
    ckpt.bundle.validate()?;
    Ok(ckpt.bundle)
}
