use super::{generate_sequence, DigitSet, SmmnistConfig};
use crate::diffcore::Tensor;
use crate::hvrnn::SequenceBatch;
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

/// Size of the held-out test set.
pub const TEST_SET_SIZE: usize = 256;

const TEST_BIT: u64 = 1 << 63;

/// Seed of training sequence `index` for a run. Always below 2^63, so
/// training and test seeds never coincide.
pub fn train_seed(run_seed: u64, index: u64) -> u64 {
    derive_seed(run_seed, index) & !TEST_BIT
}

/// The fixed held-out seeds: 2^63 + i for i < 256.
pub fn test_seeds() -> Vec<u64> {
    (0..TEST_SET_SIZE as u64).map(|i| TEST_BIT | i).collect()
}

/// Materialized sequences, each `[S, C, H, W]`, split at `context_len`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub context_len: usize,
    pub sequences: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn new(context_len: usize, sequences: Vec<Tensor<f32>>) -> Result<Self> {
        if let Some(first) = sequences.first() {
            if first.rank() != 4 || first.shape()[0] <= context_len || context_len == 0 {
                return Err(Error::contract(
                    "Dataset::new",
                    format!("sequence shape {:?} cannot be split at {context_len}", first.shape()),
                ));
            }
            if let Some(bad) = sequences.iter().find(|s| s.shape() != first.shape()) {
                return Err(Error::contract("Dataset::new", format!("mixed shapes {:?} and {:?}", first.shape(), bad.shape())));
            }
        }
        Ok(Self { context_len, sequences })
    }

    pub fn generate(cfg: &SmmnistConfig, digits: &DigitSet, seeds: &[u64]) -> Result<Self> {
        let seqs = seeds.iter().map(|&s| generate_sequence(cfg, digits, s)).collect::<Result<_>>()?;
        Self::new(cfg.context_len, seqs)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Batch of the given sequence indices.
    pub fn batch(&self, indices: &[usize]) -> Result<SequenceBatch<f32>> {
        let parts: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.sequences[i]).collect();
        split(&Tensor::stack(&parts)?, self.context_len)
    }
}

fn split(seqs: &Tensor<f32>, context_len: usize) -> Result<SequenceBatch<f32>> {
    let s = seqs.shape()[1];
    SequenceBatch::new(seqs.narrow(1, 0, context_len)?, seqs.narrow(1, context_len, s - context_len)?)
}

/// One epoch of batches. With a shuffle seed the order is a seeded
/// permutation; the last batch may be short.
pub fn make_batches(data: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<SequenceBatch<f32>>> {
    if batch_size == 0 {
        return Err(Error::contract("make_batches", "batch size must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::contract("make_batches", "dataset is empty"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        SplitMix64::new(seed).shuffle(&mut order);
    }
    order.chunks(batch_size).map(|idx| data.batch(idx)).collect()
}

/// Unlimited freshly generated batches; batch `k` holds training seeds
/// `k * batch_size ..` of the run.
pub struct BatchStream<'a> {
    cfg: SmmnistConfig,
    digits: &'a DigitSet,
    batch_size: usize,
    run_seed: u64,
    next: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(cfg: &SmmnistConfig, digits: &'a DigitSet, batch_size: usize, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if batch_size == 0 {
            return Err(Error::contract("BatchStream::new", "batch size must be >= 1"));
        }
        Ok(Self { cfg: cfg.clone(), digits, batch_size, run_seed, next: 0 })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<SequenceBatch<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        let base = self.next * self.batch_size as u64;
        self.next += 1;
        let seeds: Vec<u64> = (base..base + self.batch_size as u64).map(|i| train_seed(self.run_seed, i)).collect();
        Some(Dataset::generate(&self.cfg, self.digits, &seeds).and_then(|d| d.batch(&(0..d.len()).collect::<Vec<_>>())))
    }
}
