//! Multi-task datasets: synthetic generation, CSV ingestion and minibatching.

mod csv_io;
mod sampler;
mod synthetic;

pub use csv_io::{load_csv, write_csv};
pub use sampler::MinibatchSampler;
pub use synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec, SyntheticTask};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{Labels, LossKind, TaskSpec};
use crate::seed;
use crate::tensor::Tensor;

/// Inputs with one aligned label column per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    inputs: Tensor,
    labels: Vec<Labels>,
    tasks: Vec<TaskSpec>,
}

/// Rows drawn from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<Labels>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

impl MultiTaskDataset {
    pub fn new(inputs: Tensor, labels: Vec<Labels>, tasks: Vec<TaskSpec>) -> Result<Self> {
        if labels.len() != tasks.len() {
            return Err(Error::invalid(format!("{} label columns for {} tasks", labels.len(), tasks.len())));
        }
        if tasks.is_empty() {
            return Err(Error::invalid("a dataset needs at least one task"));
        }
        let n = inputs.rows();
        for (task, col) in tasks.iter().zip(&labels) {
            task.validate()?;
            if col.len() != n {
                return Err(Error::invalid(format!("task `{}` has {} labels for {n} rows", task.id, col.len())));
            }
            match (&task.loss, col) {
                (LossKind::SoftmaxCrossEntropy { num_classes }, Labels::Classes(c)) => {
                    if let Some(&bad) = c.iter().find(|&&l| l >= *num_classes) {
                        return Err(Error::LabelOutOfRange { label: bad, num_classes: *num_classes });
                    }
                }
                (LossKind::MeanSquaredError, Labels::Values(v)) => {
                    if task.output_dim != 1 {
                        return Err(Error::invalid(format!("task `{}`: regression columns are scalar", task.id)));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("labels of task `{}`", task.id)));
                    }
                }
                _ => return Err(Error::invalid(format!("task `{}`: label type does not match its loss", task.id))),
            }
        }
        Ok(MultiTaskDataset { inputs, labels, tasks })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[Labels] {
        &self.labels
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch { x: self.inputs.gather_rows(indices), labels: self.labels.iter().map(|l| l.gather(indices)).collect() }
    }

    pub fn full_batch(&self) -> Batch {
        Batch { x: self.inputs.clone(), labels: self.labels.clone() }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let b = self.batch(indices);
        Ok(MultiTaskDataset { inputs: b.x, labels: b.labels, tasks: self.tasks.clone() })
    }

    /// The same rows restricted to task `k`.
    pub fn single_task(&self, k: usize) -> Self {
        MultiTaskDataset {
            inputs: self.inputs.clone(),
            labels: vec![self.labels[k].clone()],
            tasks: vec![self.tasks[k].clone()],
        }
    }

    /// Seeded shuffle, then the first `test_fraction` of rows become the
    /// test split.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::config("dataset.test_fraction", "must lie in (0, 1)"));
        }
        let n = self.len();
        let n_test = ((n as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test >= n {
            return Err(Error::config("dataset.test_fraction", format!("leaves an empty split of {n} rows")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng(seed));
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }
}
