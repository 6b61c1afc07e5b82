//! Minimum cross-entropy over relabelings of the classes.
//!
//! `sigma[a]` is the logit column that true class `a` is scored against.
//! The mean loss under `sigma` decomposes as `sum_a cost[a][sigma[a]]` with
//! `cost[a][b] = sum_{i: y_i = a} -log p_i[b] / n`, so the search is a
//! linear assignment problem and the exhaustive and Hungarian solvers
//! optimize the same quantity.

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest class count searched exhaustively.
pub const EXHAUSTIVE_MAX_CLASSES: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationLoss {
    pub sigma: Vec<usize>,
    pub loss: f64,
}

pub fn permutation_cost_matrix(logits: &Tensor, labels: &[usize], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    if num_classes < 2 {
        return Err(Error::invalid("permutation search needs at least two classes"));
    }
    if logits.cols() != num_classes || logits.rows() != labels.len() {
        return Err(Error::Shape {
            node: "min_permutation_loss".into(),
            detail: format!("logits {:?} for {} labels and {num_classes} classes", logits.shape(), labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes });
    }
    let n = labels.len() as f64;
    let mut cost = vec![vec![0.0; num_classes]; num_classes];
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row_slice(r);
        let lse = log_sum_exp(row);
        for (b, &v) in row.iter().enumerate() {
            cost[y][b] += lse - v;
        }
    }
    for row in &mut cost {
        for c in row.iter_mut() {
            *c /= n;
        }
    }
    Ok(cost)
}

/// Loss of an assignment, summed in class order.
pub fn assignment_cost(cost: &[Vec<f64>], sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(a, &b)| cost[a][b]).sum()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Lexicographic search; ties keep the first permutation found.
pub fn exhaustive_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let mut p: Vec<usize> = (0..cost.len()).collect();
    let mut best = p.clone();
    let mut best_cost = assignment_cost(cost, &p);
    while next_permutation(&mut p) {
        let c = assignment_cost(cost, &p);
        if c < best_cost {
            best_cost = c;
            best.clone_from(&p);
        }
    }
    best
}

/// Minimum-cost assignment of rows to columns for a square matrix, by the
/// shortest augmenting path method with potentials. `O(n^3)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

fn finish(cost: &[Vec<f64>], sigma: Vec<usize>) -> PermutationLoss {
    PermutationLoss { loss: assignment_cost(cost, &sigma), sigma }
}

pub fn min_permutation_loss_exhaustive(logits: &Tensor, labels: &[usize], num_classes: usize) -> Result<PermutationLoss> {
    let cost = permutation_cost_matrix(logits, labels, num_classes)?;
    Ok(finish(&cost, exhaustive_assignment(&cost)))
}

pub fn min_permutation_loss_hungarian(logits: &Tensor, labels: &[usize], num_classes: usize) -> Result<PermutationLoss> {
    let cost = permutation_cost_matrix(logits, labels, num_classes)?;
    Ok(finish(&cost, hungarian(&cost)))
}

/// Exhaustive up to [`EXHAUSTIVE_MAX_CLASSES`] classes, Hungarian above.
pub fn min_permutation_loss(logits: &Tensor, labels: &[usize], num_classes: usize) -> Result<PermutationLoss> {
    if num_classes <= EXHAUSTIVE_MAX_CLASSES {
        min_permutation_loss_exhaustive(logits, labels, num_classes)
    } else {
        min_permutation_loss_hungarian(logits, labels, num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_value, Labels, LossKind};

    #[test]
    fn matching_predictions_keep_identity() {
        let logits = Tensor::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 5.0]]).unwrap();
        let r = min_permutation_loss(&logits, &[0, 1, 2], 3).unwrap();
        assert_eq!(r.sigma, vec![0, 1, 2]);
        let plain = loss_value(&LossKind::SoftmaxCrossEntropy { num_classes: 3 }, &Labels::Classes(vec![0, 1, 2]), &logits).unwrap();
        assert!((r.loss - plain).abs() < 1e-15);
    }

    #[test]
    fn flipped_binary_predictor_is_swapped() {
        let logits = Tensor::from_rows(&[vec![0.0, 4.0], vec![4.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let labels = [0, 1, 0];
        let r = min_permutation_loss(&logits, &labels, 2).unwrap();
        assert_eq!(r.sigma, vec![1, 0]);
        let unflipped = Tensor::from_rows(&[vec![4.0, 0.0], vec![0.0, 4.0], vec![4.0, 0.0]]).unwrap();
        let perfect = loss_value(&LossKind::SoftmaxCrossEntropy { num_classes: 2 }, &Labels::Classes(labels.to_vec()), &unflipped).unwrap();
        assert!((r.loss - perfect).abs() < 1e-15);
    }

    #[test]
    fn permutations_enumerated_once() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn hungarian_small_known_case() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&cost);
        assert_eq!(assignment_cost(&cost, &a), 5.0);
        assert_eq!(a, exhaustive_assignment(&cost));
    }
}
