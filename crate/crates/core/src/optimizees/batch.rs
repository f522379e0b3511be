use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Indices into an optimizee's training samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn full(n: usize) -> Self {
        Self { indices: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    WithReplacement,
    EpochShuffle,
}

/// How minibatches are drawn. `batch_size = None` means the full training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSchedule {
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    #[serde(default)]
    pub seed: u64,
}

fn default_sampling() -> Sampling {
    Sampling::EpochShuffle
}

impl Default for BatchSchedule {
    fn default() -> Self {
        Self { batch_size: None, sampling: Sampling::EpochShuffle, seed: 0 }
    }
}

impl BatchSchedule {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn sampler(&self, n: usize, replicate: u64) -> Result<BatchSampler> {
        let size = self.batch_size.unwrap_or(n);
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if size == 0 || size > n {
            return Err(Error::InvalidBatch(format!("batch size {size} with {n} samples")));
        }
        Ok(BatchSampler {
            n,
            size,
            sampling: self.sampling,
            rng: rng::stream(self.seed, replicate, rng::tag::BATCH),
            perm: Vec::new(),
            cursor: 0,
        })
    }
}

/// Stateful batch iterator produced by [`BatchSchedule::sampler`].
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    size: usize,
    sampling: Sampling,
    rng: Rng,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn is_full_batch(&self) -> bool {
        self.size == self.n
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.size == self.n {
            return Batch::full(self.n);
        }
        let indices = match self.sampling {
            Sampling::WithReplacement => (0..self.size).map(|_| self.rng.random_range(0..self.n)).collect(),
            Sampling::EpochShuffle => {
                let mut out = Vec::with_capacity(self.size);
                while out.len() < self.size {
                    if self.cursor >= self.perm.len() {
                        self.perm = (0..self.n).collect();
                        self.perm.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    out.push(self.perm[self.cursor]);
                    self.cursor += 1;
                }
                out
            }
        };
        Batch { indices }
    }
}
