use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{save_checkpoint, Checkpoint};
use crate::{Error, Result};

/// One optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    pub recon: f64,
    /// KL per level, summed over timesteps.
    pub kl: Vec<f64>,
    /// The optimized loss, `recon + beta * sum(kl)`.
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Per-epoch evaluation; ELBOs are per-sequence negative ELBOs at beta = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_elbo: Option<f64>,
    pub test_elbo: Option<f64>,
}

/// Why a checkpoint is being written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Periodic,
    Final,
    /// Last good state before a numeric failure.
    Abort,
}

pub trait LogSink {
    fn step(&mut self, rec: &StepRecord) -> Result<()>;
    fn epoch(&mut self, rec: &EpochRecord) -> Result<()>;
    fn checkpoint(&mut self, _ck: &Checkpoint, _kind: CheckpointKind) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<(CheckpointKind, Checkpoint)>,
}

impl LogSink for MemorySink {
    fn step(&mut self, rec: &StepRecord) -> Result<()> {
        self.steps.push(rec.clone());
        Ok(())
    }

    fn epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        self.epochs.push(rec.clone());
        Ok(())
    }

    fn checkpoint(&mut self, ck: &Checkpoint, kind: CheckpointKind) -> Result<()> {
        self.checkpoints.push((kind, ck.clone()));
        Ok(())
    }
}

/// Writes `train_log.csv`, `epochs.csv` and checkpoints under a directory.
/// Periodic checkpoints go to `checkpoints/epoch_NNNN`; the final or abort
/// checkpoint to `checkpoint`.
pub struct CsvSink {
    dir: PathBuf,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
    levels: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CsvSink {
    pub fn new(dir: &Path, levels: usize) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut steps = create(&dir.join("train_log.csv"))?;
        let kl: String = (0..levels).map(|l| format!(",kl_level_{l}")).collect();
        writeln!(steps, "step,epoch,lr,beta,recon{kl},total").map_err(|e| Error::io(dir.join("train_log.csv"), e))?;
        let mut epochs = create(&dir.join("epochs.csv"))?;
        writeln!(epochs, "epoch,step,train_elbo,test_elbo").map_err(|e| Error::io(dir.join("epochs.csv"), e))?;
        Ok(Self { dir: dir.to_path_buf(), steps, epochs, levels })
    }

    pub fn final_checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoint")
    }
}

impl LogSink for CsvSink {
    fn step(&mut self, r: &StepRecord) -> Result<()> {
        if r.kl.len() != self.levels {
            return Err(Error::contract("CsvSink::step", format!("{} KL values for {} levels", r.kl.len(), self.levels)));
        }
        let kl: String = r.kl.iter().map(|k| format!(",{k}")).collect();
        writeln!(self.steps, "{},{},{},{},{}{kl},{}", r.step, r.epoch, r.lr, r.beta, r.recon, r.total)
            .and_then(|_| self.steps.flush())
            .map_err(|e| Error::io(self.dir.join("train_log.csv"), e))
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.epochs, "{},{},{},{}", r.epoch, r.step, opt(r.train_elbo), opt(r.test_elbo))
            .and_then(|_| self.epochs.flush())
            .map_err(|e| Error::io(self.dir.join("epochs.csv"), e))
    }

    fn checkpoint(&mut self, ck: &Checkpoint, kind: CheckpointKind) -> Result<()> {
        let dir = match kind {
            CheckpointKind::Periodic => self.dir.join("checkpoints").join(format!("epoch_{:04}", ck.epoch)),
            CheckpointKind::Final | CheckpointKind::Abort => self.final_checkpoint_dir(),
        };
        save_checkpoint(ck, &dir)
    }
}
