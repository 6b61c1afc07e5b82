//! Empirical check that universality falls as the dummy gradient norm
//! grows, on a family where the loss is convex in a linear dummy head.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optimal::{fit_head, head_loss_and_grad, FitBudget};
use super::universality::{universality_on, UniversalityMode};
use crate::autodiff::smoothed_norm;
use crate::error::{Error, Result};
use crate::losses::{argmax, Labels, TaskSpec};
use crate::model::{init_mlp, Activation, LayerParams, Mlp, SharedEncoder, TaskPredictor};
use crate::seed;
use crate::tensor::Tensor;

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("spearman needs equally long samples"));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("{} samples, need at least 3", x.len())));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a sample is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrendTask {
    Regression,
    Classification { num_classes: usize },
}

/// Random linear encoders with orthonormal rows times `scale`, a fixed
/// Gaussian dataset, and one fixed linear dummy head. Whitened inputs and
/// orthonormal rows keep the head curvature alike across encoders, so the
/// encoders differ only in which subspace of the inputs they keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendFamily {
    pub task: TrendTask,
    pub n: usize,
    pub input_dim: usize,
    pub rep_dim: usize,
    pub scale: f64,
    pub noise_std: f64,
    pub fit: FitBudget,
}

impl Default for TrendFamily {
    fn default() -> Self {
        TrendFamily {
            task: TrendTask::Regression,
            n: 128,
            input_dim: 6,
            rep_dim: 3,
            scale: 1.0,
            noise_std: 0.1,
            fit: FitBudget { max_iters: 5000, grad_tol: 1e-6 },
        }
    }
}

impl TrendFamily {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.input_dim < 1 || self.rep_dim < 1 {
            return Err(Error::config("trend", "n >= 2 and positive widths are required"));
        }
        if self.rep_dim > self.input_dim {
            return Err(Error::config("trend.rep_dim", "cannot exceed input_dim"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("trend.scale", "must be positive"));
        }
        if let TrendTask::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::config("trend.task.num_classes", "must be at least 2"));
            }
        }
        Ok(())
    }

    fn spec(&self) -> TaskSpec {
        match self.task {
            TrendTask::Regression => TaskSpec::regression("trend"),
            TrendTask::Classification { num_classes } => TaskSpec::classification("trend", num_classes),
        }
    }

    /// Inputs, labels and the fixed dummy head for a base seed.
    pub fn problem(&self, seed: u64) -> Result<(Tensor, Labels, TaskPredictor)> {
        self.validate()?;
        let mut rng = seed::rng(seed::derive(seed, 0));
        let p = self.input_dim;
        let x: Vec<f64> = (0..self.n * p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x = Tensor::from_raw(self.n, p, x);
        let spec = self.spec();
        let out = spec.output_dim;
        let teacher = init_mlp(&[p, out], Activation::Identity, Activation::Identity, seed::derive(seed, 1))?;
        let t = Mlp { layers: teacher }.forward(&x)?;
        let labels = match self.task {
            TrendTask::Regression => Labels::Values(
                (0..self.n).map(|r| 3.0 * t.get(r, 0) + self.noise_std * rng.sample::<f64, _>(StandardNormal)).collect(),
            ),
            TrendTask::Classification { .. } => Labels::Classes((0..self.n).map(|r| argmax(t.row_slice(r))).collect()),
        };
        let layers = init_mlp(&[self.rep_dim, out], Activation::Identity, Activation::Identity, seed::derive(seed, 2))?;
        let dummy = TaskPredictor { mlp: Mlp { layers }, task_id: spec.id, trainable: false };
        Ok((x, labels, dummy))
    }

    /// Gram-Schmidt on Gaussian rows.
    pub fn sample_encoder(&self, seed: u64) -> Result<SharedEncoder> {
        self.validate()?;
        let mut rng = seed::rng(seed);
        let p = self.input_dim;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(self.rep_dim);
        while rows.len() < self.rep_dim {
            let mut v: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let w: Vec<f64> = rows.concat().into_iter().map(|a| a * self.scale).collect();
        Mlp::new(vec![LayerParams {
            weight: Tensor::new(self.rep_dim, p, w)?,
            bias: Tensor::zeros(1, self.rep_dim),
            activation: Activation::Identity,
        }])
        .map(SharedEncoder::new)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSample {
    pub u: f64,
    pub grad_norm: f64,
    pub gap: f64,
    pub optimal_converged: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    /// Spearman correlation between `U` and `1 / ||grad||`.
    pub rho: f64,
    pub used: usize,
    pub excluded_degenerate: usize,
    pub samples: Vec<TrendSample>,
}

/// Difference-mode universality and dummy gradient norm for each encoder.
pub fn trend_over_encoders(family: &TrendFamily, encoders: &[SharedEncoder], seed: u64) -> Result<TrendResult> {
    if encoders.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("{} samples, need at least 3", encoders.len())));
    }
    let (x, labels, dummy) = family.problem(seed)?;
    let spec = family.spec();
    let samples: Vec<TrendSample> = encoders
        .par_iter()
        .map(|enc| {
            let z = enc.mlp.forward(&x)?;
            let (_, g) = head_loss_and_grad(&dummy.mlp, &z, &labels, &spec.loss)?;
            let fit = fit_head(&dummy, &z, &labels, &spec.loss, &family.fit)?;
            let r = universality_on(&z, &dummy, &fit.predictor, &labels, &spec, UniversalityMode::Difference)?;
            Ok(TrendSample {
                u: r.u,
                grad_norm: smoothed_norm(g.tensors()),
                gap: r.raw,
                optimal_converged: fit.converged,
                degenerate: r.degenerate,
            })
        })
        .collect::<Result<_>>()?;
    let kept: Vec<&TrendSample> = samples.iter().filter(|s| !s.degenerate).collect();
    let u: Vec<f64> = kept.iter().map(|s| s.u).collect();
    let inv: Vec<f64> = kept.iter().map(|s| 1.0 / s.grad_norm).collect();
    let rho = spearman(&u, &inv)?;
    Ok(TrendResult { rho, used: kept.len(), excluded_degenerate: samples.len() - kept.len(), samples })
}

/// Samples `num_samples` encoders from `family` and correlates universality
/// with the inverse dummy gradient norm.
pub fn theorem_trend_check(family: &TrendFamily, num_samples: usize, seed: u64) -> Result<TrendResult> {
    if num_samples < 3 {
        return Err(Error::UndefinedCorrelation(format!("{num_samples} samples, need at least 3")));
    }
    let encoders = (0..num_samples)
        .map(|i| family.sample_encoder(seed::derive(seed, 1000 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    trend_over_encoders(family, &encoders, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_ranks() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[1.0, 8.0, 27.0, 64.0]).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(theorem_trend_check(&TrendFamily::default(), 1, 0), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn replicated_encoder_is_all_ties() {
        let fam = TrendFamily::default();
        let enc = fam.sample_encoder(5).unwrap();
        let r = trend_over_encoders(&fam, &[enc.clone(), enc.clone(), enc], 0);
        assert!(matches!(r, Err(Error::UndefinedCorrelation(_))));
    }
}
