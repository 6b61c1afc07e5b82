//! Dummy gradient-norm regularization for hard-parameter-sharing
//! multi-task learning, built on a small reverse-mode autodiff tape.

pub mod autodiff;
pub mod data;
pub mod dgr;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_of_grad_norm_exact, smoothed_norm, GradNormGradient, Tape, Var, NORM_EPSILON};
pub use data::{Batch, MinibatchSampler, MultiTaskDataset};
pub use error::{Error, Result};
pub use losses::{Direction, Labels, LossKind, TaskSpec};
pub use model::{Activation, ModelBundle, ModelConfig, SharedEncoder, TaskPredictor};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport};
pub use tensor::Tensor;
pub use dgr::{DgrConfig, FdStep};
pub use trainer::{train, train_step, StepRecord, TrainConfig, TrainOutcome, TrainState};
