use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::synthgen::Dataset;

/// Endless index stream over `n` items: each epoch is a fresh permutation
/// seeded by `(seed, tag, epoch)`, so small sets are cycled.
#[derive(Clone, Debug)]
pub struct EpochStream {
    n: usize,
    seed: u64,
    tag: String,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl EpochStream {
    pub fn new(n: usize, seed: u64, tag: &str, what: &'static str) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset(what));
        }
        let mut s = Self {
            n,
            seed,
            tag: tag.to_owned(),
            epoch: 0,
            perm: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.perm = (0..self.n).collect();
        self.perm
            .shuffle(&mut rng_for(self.seed, &self.tag, self.epoch));
        self.pos = 0;
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.shuffle();
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Samples per domain in one mixed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub source: usize,
    pub target: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            source: 16,
            target: 16,
        }
    }
}

/// Indices into the source and target datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Endless iterator of mixed batches.
#[derive(Clone, Debug)]
pub struct MixedBatches {
    spec: BatchSpec,
    source: EpochStream,
    target: EpochStream,
}

impl Iterator for MixedBatches {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        Some(MixedBatch {
            source: self.source.take(self.spec.source),
            target: self.target.take(self.spec.target),
        })
    }
}

pub fn make_batches(
    source: &Dataset,
    target: &Dataset,
    spec: BatchSpec,
    seed: u64,
) -> Result<MixedBatches> {
    if spec.source == 0 || spec.target == 0 {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    Ok(MixedBatches {
        spec,
        source: EpochStream::new(source.len(), seed, "batch/source", "source training set")?,
        target: EpochStream::new(target.len(), seed, "batch/target", "target training set")?,
    })
}
