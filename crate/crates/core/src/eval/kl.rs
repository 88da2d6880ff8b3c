use std::fmt::Write as _;
use std::path::Path;

use crate::data::{make_batches, Dataset};
use crate::diffcore::{Graph, ParamStore};
use crate::hvrnn::{GaussianNoise, Model};
use crate::rng::derive_seed;
use crate::{Error, Result};

pub const ACTIVE_THRESHOLD: f64 = 0.01;
pub const MAXIMAL_THRESHOLD: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelActivity {
    pub level: usize,
    pub channel: usize,
    /// KL in nats per latent unit, averaged over sequences, timesteps and positions.
    pub mean_kl: f64,
    pub active: bool,
    pub maximal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlActivityReport {
    pub channels: Vec<ChannelActivity>,
    pub active_per_level: Vec<usize>,
    pub maximal_per_level: Vec<usize>,
}

impl KlActivityReport {
    /// Apply the thresholds to per-`[level][channel]` mean KLs.
    pub fn from_means(means: &[Vec<f64>]) -> Self {
        let mut channels = Vec::new();
        let mut active_per_level = vec![0; means.len()];
        let mut maximal_per_level = vec![0; means.len()];
        for (level, row) in means.iter().enumerate() {
            for (channel, &mean_kl) in row.iter().enumerate() {
                let active = mean_kl > ACTIVE_THRESHOLD;
                let maximal = mean_kl > MAXIMAL_THRESHOLD;
                active_per_level[level] += usize::from(active);
                maximal_per_level[level] += usize::from(maximal);
                channels.push(ChannelActivity { level, channel, mean_kl, active, maximal });
            }
        }
        Self { channels, active_per_level, maximal_per_level }
    }

    /// `level,channel,mean_kl,active,maximal` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("level,channel,mean_kl,active,maximal\n");
        for c in &self.channels {
            writeln!(s, "{},{},{},{},{}", c.level, c.channel, c.mean_kl, c.active, c.maximal).expect("string write");
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Posterior ELBO passes over a dataset, collecting per-channel KL.
pub fn kl_activity(model: &Model, store: &ParamStore<f32>, data: &Dataset, batch_size: usize, seed: u64) -> Result<KlActivityReport> {
    let levels = model.config.levels.len();
    if levels == 0 {
        return Err(Error::contract("kl_activity", "model has no latent levels"));
    }
    let mut sums: Vec<Vec<f64>> = (0..levels).map(|l| vec![0.0; model.config.latent_channels(l)]).collect();
    let mut seqs = 0usize;
    for (k, batch) in make_batches(data, batch_size, None)?.iter().enumerate() {
        let mut g = Graph::new();
        let out = model.elbo(&mut g, store, batch, 1.0, &mut GaussianNoise::new(derive_seed(seed, k as u64)))?;
        let (b, t) = (batch.batch_size(), batch.horizon());
        for (acc, row) in sums.iter_mut().zip(&out.kl_channels) {
            for (a, &v) in acc.iter_mut().zip(row) {
                // kl_channels is a batch mean summed over timesteps.
                *a += v * b as f64 / t as f64;
            }
        }
        seqs += b;
    }
    let means: Vec<Vec<f64>> = sums.iter().map(|r| r.iter().map(|v| v / seqs as f64).collect()).collect();
    Ok(KlActivityReport::from_means(&means))
}
