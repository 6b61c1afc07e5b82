use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::losses::{Labels, TaskSpec};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// Labels are a grouping of the mixture components into `num_classes`
    /// classes. Tasks with the same `grouping_seed` and class count share
    /// a grouping.
    Classification { num_classes: usize, grouping_seed: Option<u64> },
    /// A seeded linear read-out of the latent code plus noise.
    Regression { weights_seed: Option<u64> },
}

/// Unknown keys are rejected by the flattened kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    #[serde(flatten)]
    pub kind: SyntheticKind,
}

/// Shared-latent generator: latent codes come from a Gaussian mixture and
/// every task reads the same latent, so tasks are related by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub latent_dim: usize,
    pub num_components: usize,
    /// Mixture weights; uniform when absent.
    #[serde(default)]
    pub component_weights: Option<Vec<f64>>,
    /// Standard deviation of the component means.
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub tasks: Vec<SyntheticTask>,
    pub noise_std: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    2.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("dataset.synthetic.{f}");
        if self.n == 0 {
            return Err(Error::config(field("n"), "must be positive"));
        }
        if self.p == 0 || self.latent_dim == 0 {
            return Err(Error::config(field("p"), "dimensions must be positive"));
        }
        if self.latent_dim > self.p {
            return Err(Error::config(field("latent_dim"), "cannot exceed p"));
        }
        if self.num_components == 0 {
            return Err(Error::config(field("num_components"), "must be positive"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config(field("tasks"), "at least one task is required"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(field("noise_std"), "must be finite and nonnegative"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::config(field("separation"), "must be positive"));
        }
        if let Some(w) = &self.component_weights {
            if w.len() != self.num_components || w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config(field("component_weights"), "need one nonnegative weight per component"));
            }
        }
        for t in &self.tasks {
            if let SyntheticKind::Classification { num_classes, .. } = t.kind {
                if num_classes < 2 {
                    return Err(Error::config(field("tasks"), format!("task `{}` needs at least two classes", t.id)));
                }
                if num_classes > self.num_components {
                    return Err(Error::config(
                        field("tasks"),
                        format!(
                            "task `{}` asks for {num_classes} classes from {} mixture components",
                            t.id, self.num_components
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Normalized mixture weights.
    pub fn weights(&self) -> Vec<f64> {
        let raw = self.component_weights.clone().unwrap_or_else(|| vec![1.0; self.num_components]);
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }

    /// Component-to-class map of a classification task.
    pub fn grouping(&self, task_index: usize) -> Option<Vec<usize>> {
        let SyntheticKind::Classification { num_classes, grouping_seed } = self.tasks[task_index].kind else {
            return None;
        };
        let s = grouping_seed.unwrap_or_else(|| seed::derive(self.seed, 1000 + task_index as u64));
        let mut order: Vec<usize> = (0..self.num_components).collect();
        order.shuffle(&mut seed::rng(s));
        let mut group = vec![0; self.num_components];
        for (j, &c) in order.iter().enumerate() {
            group[c] = j % num_classes;
        }
        Some(group)
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<MultiTaskDataset> {
    spec.validate()?;
    let (n, p, l) = (spec.n, spec.p, spec.latent_dim);

    let mut structure = seed::rng(seed::derive(spec.seed, 1));
    let means: Vec<Vec<f64>> = (0..spec.num_components)
        .map(|_| (0..l).map(|_| spec.separation * gaussian(&mut structure)).collect())
        .collect();
    let embed: Vec<f64> = (0..p * l).map(|_| gaussian(&mut structure) / (l as f64).sqrt()).collect();

    let picker = WeightedIndex::new(spec.weights()).map_err(|e| Error::config("dataset.synthetic.component_weights", e.to_string()))?;
    let mut sampler = seed::rng(seed::derive(spec.seed, 2));
    let mut components = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n * p);
    for _ in 0..n {
        let c = picker.sample(&mut sampler);
        let z: Vec<f64> = means[c].iter().map(|m| m + gaussian(&mut sampler)).collect();
        for row in 0..p {
            let e = &embed[row * l..(row + 1) * l];
            let clean: f64 = e.iter().zip(&z).map(|(a, b)| a * b).sum();
            inputs.push(clean + spec.noise_std * gaussian(&mut sampler));
        }
        components.push(c);
        latents.push(z);
    }

    let mut labels = Vec::with_capacity(spec.tasks.len());
    let mut tasks = Vec::with_capacity(spec.tasks.len());
    for (k, t) in spec.tasks.iter().enumerate() {
        match t.kind {
            SyntheticKind::Classification { num_classes, .. } => {
                let group = spec.grouping(k).expect("classification task");
                labels.push(Labels::Classes(components.iter().map(|&c| group[c]).collect()));
                tasks.push(TaskSpec::classification(t.id.clone(), num_classes));
            }
            SyntheticKind::Regression { weights_seed } => {
                let s = weights_seed.unwrap_or_else(|| seed::derive(spec.seed, 2000 + k as u64));
                let mut wr = seed::rng(s);
                let w: Vec<f64> = (0..l).map(|_| gaussian(&mut wr) / (l as f64).sqrt()).collect();
                let mut noise = seed::rng(seed::derive(s, 1));
                let y = latents
                    .iter()
                    .map(|z| w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + spec.noise_std * gaussian(&mut noise))
                    .collect();
                labels.push(Labels::Values(y));
                tasks.push(TaskSpec::regression(t.id.clone()));
            }
        }
    }
    MultiTaskDataset::new(Tensor::from_raw(n, p, inputs), labels, tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            n,
            p: 6,
            latent_dim: 3,
            num_components: 6,
            component_weights: None,
            separation: 2.0,
            tasks: vec![
                SyntheticTask { id: "a".into(), kind: SyntheticKind::Classification { num_classes: 3, grouping_seed: Some(5) } },
                SyntheticTask { id: "b".into(), kind: SyntheticKind::Regression { weights_seed: None } },
            ],
            noise_std: 0.1,
            seed: 9,
        }
    }

    #[test]
    fn shapes() {
        let d = gen_synthetic(&spec(100)).unwrap();
        assert_eq!(d.len(), 100);
        assert_eq!(d.input_dim(), 6);
        assert_eq!(d.num_tasks(), 2);
        assert!(d.labels().iter().all(|l| l.len() == 100));
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(gen_synthetic(&spec(50)).unwrap(), gen_synthetic(&spec(50)).unwrap());
        let mut other = spec(50);
        other.seed = 10;
        assert_ne!(gen_synthetic(&spec(50)).unwrap().inputs(), gen_synthetic(&other).unwrap().inputs());
    }

    #[test]
    fn identical_groupings_give_identical_labels() {
        let mut s = spec(200);
        s.noise_std = 0.0;
        s.tasks = vec![
            SyntheticTask { id: "a".into(), kind: SyntheticKind::Classification { num_classes: 3, grouping_seed: Some(1) } },
            SyntheticTask { id: "b".into(), kind: SyntheticKind::Classification { num_classes: 3, grouping_seed: Some(1) } },
        ];
        let d = gen_synthetic(&s).unwrap();
        assert_eq!(d.labels()[0], d.labels()[1]);
    }

    #[test]
    fn too_many_classes_rejected() {
        let mut s = spec(10);
        s.tasks[0].kind = SyntheticKind::Classification { num_classes: 7, grouping_seed: None };
        assert!(matches!(gen_synthetic(&s), Err(Error::Config { .. })));
    }

    #[test]
    fn class_frequencies_track_mixture_weights() {
        let mut s = spec(10_000);
        s.component_weights = Some(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = gen_synthetic(&s).unwrap();
        let group = s.grouping(0).unwrap();
        let weights = s.weights();
        let mut expected = [0.0; 3];
        for (c, &g) in group.iter().enumerate() {
            expected[g] += weights[c];
        }
        let Labels::Classes(c) = &d.labels()[0] else { panic!() };
        for (class, &e) in expected.iter().enumerate() {
            let observed = c.iter().filter(|&&l| l == class).count() as f64 / c.len() as f64;
            assert!((observed - e).abs() <= 0.1 * e, "class {class}: {observed} vs {e}");
        }
    }
}
