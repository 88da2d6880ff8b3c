use super::log::CheckpointKind;
use super::{adam_step, beta_at, clip_grad_norm, lr_at, Adam, Checkpoint, EpochRecord, LogSink, StepRecord, TrainSchedule};
use crate::data::{make_batches, Dataset};
use crate::diffcore::{Graph, ParamStore};
use crate::hvrnn::{GaussianNoise, Model, ModelConfig};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

/// Mutable training state; everything a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    pub schedule: TrainSchedule,
    pub step: u64,
    pub epoch: usize,
    /// Source of per-step noise seeds.
    pub rng: SplitMix64,
}

impl TrainState {
    /// Fresh model initialized from `schedule.seed`.
    pub fn new(config: &ModelConfig, schedule: &TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let (model, store) = Model::new::<f32>(config, schedule.seed)?;
        let adam = Adam::new(&store);
        let rng = SplitMix64::derive(schedule.seed, 1);
        Ok(Self { model, store, adam, schedule: schedule.clone(), step: 0, epoch: 0, rng })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(&ck.model, &ck.schedule)?;
        ck.restore_params(&mut s.store)?;
        s.adam = ck.restore_adam(&s.store)?;
        s.step = ck.step;
        s.epoch = ck.epoch;
        s.rng = SplitMix64::new(ck.rng_state);
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.config, &self.schedule, &self.store, &self.adam, self.step, self.epoch, self.rng.state())
    }
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    /// Held-out sequences for the per-epoch test ELBO.
    pub test: Option<&'a Dataset>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Mean per-sequence negative ELBO at beta = 1 over a dataset.
pub fn evaluate_elbo(model: &Model, store: &ParamStore<f32>, data: &Dataset, batch_size: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (k, batch) in make_batches(data, batch_size, None)?.iter().enumerate() {
        let mut g = Graph::new();
        let out = model.elbo(&mut g, store, batch, 1.0, &mut GaussianNoise::new(derive_seed(seed, k as u64)))?;
        total += out.nelbo() * batch.batch_size() as f64;
    }
    Ok(total / data.len() as f64)
}

fn subset(data: &Dataset, n: usize) -> Result<Dataset> {
    Dataset::new(data.context_len, data.sequences[..n.min(data.len())].to_vec())
}

/// Run epochs `state.epoch..schedule.epochs`. Per step: beta and lr from the
/// schedules, posterior ELBO, backward, norm clipping, Adam. Resuming from a
/// checkpoint continues the exact trajectory of an uninterrupted run.
pub fn train(state: &mut TrainState, data: &TrainData, sink: &mut dyn LogSink) -> Result<TrainOutput> {
    let s = state.schedule.clone();
    s.validate()?;
    let mut out = TrainOutput { checkpoint: state.checkpoint(), steps: Vec::new(), epochs: Vec::new() };
    if state.epoch >= s.epochs {
        return Ok(out);
    }
    let eval_train = if s.eval_train_sequences > 0 { Some(subset(data.train, s.eval_train_sequences)?) } else { None };
    while state.epoch < s.epochs {
        let batches = make_batches(data.train, s.batch_size, Some(derive_seed(s.seed, state.epoch as u64)))?;
        let per_epoch = batches.len();
        let done = (state.step - (state.epoch * per_epoch) as u64) as usize;
        let beta = beta_at(state.epoch, &s);
        for batch in batches.iter().skip(done) {
            let lr = lr_at(state.step, per_epoch, &s);
            let noise_seed = state.rng.next_u64();
            match train_step(state, batch, beta, lr, noise_seed) {
                Ok(rec) => {
                    sink.step(&rec)?;
                    out.steps.push(rec);
                }
                Err(e) if e.is_numeric() => {
                    ::log::error!("aborting at step {} (epoch {}): {e}", state.step, state.epoch);
                    sink.checkpoint(&state.checkpoint(), CheckpointKind::Abort)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch += 1;
        let ev_seed = derive_seed(s.seed, 1 << 32);
        let bs = s.batch_size;
        let train_elbo = eval_train.as_ref().map(|d| evaluate_elbo(&state.model, &state.store, d, bs, ev_seed)).transpose()?;
        let test_elbo = data.test.map(|d| evaluate_elbo(&state.model, &state.store, d, bs, ev_seed)).transpose()?;
        let rec = EpochRecord { epoch: state.epoch, step: state.step, train_elbo, test_elbo };
        ::log::info!("epoch {} step {}: train ELBO {train_elbo:?}, test ELBO {test_elbo:?}", state.epoch, state.step);
        sink.epoch(&rec)?;
        out.epochs.push(rec);
        if s.checkpoint_every > 0 && state.epoch % s.checkpoint_every == 0 && state.epoch < s.epochs {
            sink.checkpoint(&state.checkpoint(), CheckpointKind::Periodic)?;
        }
    }
    out.checkpoint = state.checkpoint();
    sink.checkpoint(&out.checkpoint, CheckpointKind::Final)?;
    Ok(out)
}

fn train_step(
    state: &mut TrainState,
    batch: &crate::hvrnn::SequenceBatch<f32>,
    beta: f64,
    lr: f64,
    noise_seed: u64,
) -> Result<StepRecord> {
    let mut g = Graph::new();
    let elbo = state.model.elbo(&mut g, &state.store, batch, beta, &mut GaussianNoise::new(noise_seed))?;
    let total = g.value(elbo.loss).data()[0] as f64;
    if !total.is_finite() {
        return Err(Error::numeric(format!("loss at step {}", state.step), format!("loss is {total}")));
    }
    let mut grads = g.backward(elbo.loss)?;
    let (grad_norm, clipped) = clip_grad_norm(&mut grads, state.schedule.grad_clip);
    if clipped {
        ::log::debug!("step {}: gradient norm {grad_norm:.3} clipped to {}", state.step, state.schedule.grad_clip);
    }
    adam_step(&mut state.store, &grads, &mut state.adam, lr, &state.schedule)?;
    let rec = StepRecord {
        step: state.step,
        epoch: state.epoch,
        lr,
        beta,
        recon: elbo.recon_total(),
        kl: elbo.kl_per_level(),
        total,
        grad_norm,
        clipped,
    };
    state.step += 1;
    Ok(rec)
}
