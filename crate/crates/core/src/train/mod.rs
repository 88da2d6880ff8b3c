//! Optimization: schedules, Adam with decoupled weight decay, checkpoints and
//! the teacher-forced training loop.

mod adam;
mod checkpoint;
mod log;
mod run;
mod schedule;

pub use adam::{adam_step, clip_grad_norm, Adam};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, FORMAT_VERSION};
pub use log::{CheckpointKind, CsvSink, EpochRecord, LogSink, MemorySink, StepRecord};
pub use run::{evaluate_elbo, train, TrainData, TrainOutput, TrainState};
pub use schedule::{beta_at, lr_at, BetaMode, TrainSchedule};
