//! k-nearest-neighbour probe on frozen representations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::data::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::losses::{Direction, Labels};
use crate::model::{encode, SharedEncoder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Neighbour {
    dist: f64,
    index: usize,
}

impl Eq for Neighbour {}

impl Ord for Neighbour {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbour {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` training rows nearest to `query`, ordered by (distance, index).
/// Distances are Euclidean.
pub fn nearest(train: &Tensor, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for i in 0..train.rows() {
        let cand = Neighbour { dist: sq_dist(train.row_slice(i), query), index: i };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(top) = heap.peek() {
            if cand < *top {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    heap.into_sorted_vec().into_iter().map(|n| (n.index, n.dist.sqrt())).collect()
}

/// Majority vote; ties go to the smallest summed distance, then the lower
/// class index.
pub fn vote(neighbours: &[(usize, f64)], labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    let mut dist = vec![0.0; num_classes];
    for &(i, d) in neighbours {
        counts[labels[i]] += 1;
        dist[labels[i]] += d;
    }
    let mut best = 0;
    for c in 1..num_classes {
        if counts[c] > counts[best] || (counts[c] == counts[best] && dist[c] < dist[best]) {
            best = c;
        }
    }
    best
}

fn check(train: &Tensor, test: &Tensor, k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if train.rows() == 0 {
        return Err(Error::invalid("empty training set"));
    }
    if train.cols() != test.cols() {
        return Err(Error::Shape { node: "knn".into(), detail: format!("{} vs {} columns", train.cols(), test.cols()) });
    }
    Ok(())
}

pub fn knn_classify(train: &Tensor, labels: &[usize], num_classes: usize, test: &Tensor, k: usize) -> Result<Vec<usize>> {
    check(train, test, k)?;
    Ok((0..test.rows()).map(|r| vote(&nearest(train, test.row_slice(r), k), labels, num_classes)).collect())
}

/// Mean target of the `k` nearest rows.
pub fn knn_regress(train: &Tensor, targets: &[f64], test: &Tensor, k: usize) -> Result<Vec<f64>> {
    check(train, test, k)?;
    Ok((0..test.rows())
        .map(|r| {
            let nb = nearest(train, test.row_slice(r), k);
            nb.iter().map(|&(i, _)| targets[i]).sum::<f64>() / nb.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub task_id: String,
    /// Accuracy for classification, mean absolute error for regression.
    pub metric: f64,
    pub direction: Direction,
}

/// Encodes both splits with the frozen encoder and scores a kNN predictor
/// per task.
pub fn knn_probe(encoder: &SharedEncoder, train: &MultiTaskDataset, test: &MultiTaskDataset, k: usize) -> Result<Vec<ProbeScore>> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let zt = encode(encoder, train.inputs())?;
    let zq = encode(encoder, test.inputs())?;
    train
        .tasks()
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            let metric = match (&train.labels()[t], &test.labels()[t]) {
                (Labels::Classes(tr), Labels::Classes(te)) => {
                    let nc = spec.loss.num_classes().unwrap_or(2);
                    let pred = knn_classify(&zt, tr, nc, &zq, k)?;
                    pred.iter().zip(te).filter(|(p, y)| p == y).count() as f64 / te.len() as f64
                }
                (Labels::Values(tr), Labels::Values(te)) => {
                    let pred = knn_regress(&zt, tr, &zq, k)?;
                    pred.iter().zip(te).map(|(p, y)| (p - y).abs()).sum::<f64>() / te.len() as f64
                }
                _ => return Err(Error::invalid(format!("task `{}`: split label types differ", spec.id))),
            };
            Ok(ProbeScore { task_id: spec.id.clone(), metric, direction: spec.direction })
        })
        .collect()
}
