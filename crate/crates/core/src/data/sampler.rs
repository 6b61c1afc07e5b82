use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Endless stream of index batches: each epoch is a fresh permutation of
/// `0..n` cut into `ceil(n / b)` batches, the last one possibly short.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl MinibatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if n == 0 {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        if batch_size > n {
            return Err(Error::invalid(format!("batch size {batch_size} exceeds dataset size {n}")));
        }
        Ok(MinibatchSampler { n, batch_size, rng: seed::rng(seed), order: Vec::new(), cursor: n, epoch: 0 })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Completed-or-current epoch count; 0 before the first batch.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    /// True when the next call to [`next_batch`](Self::next_batch) starts a new epoch.
    pub fn at_epoch_boundary(&self) -> bool {
        self.cursor >= self.n
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        debug_assert!(self.at_epoch_boundary());
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

impl Iterator for MinibatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
