use crate::diffcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::dists::{self, Gaussian, GaussianParams};
use crate::nn::ConvLstmState;
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

use super::config::ModelConfig;
use super::layers::{Conditioning, Decoder, Encoder, InitNet, Ladder, Pyramid};
use super::noise::{GaussianNoise, NoiseSource, ZeroNoise};

/// Context and target frames, `[B, D, C, H, W]` and `[B, T, C, H, W]`, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<R: Real = f32> {
    pub context: Tensor<R>,
    pub targets: Tensor<R>,
}

impl<R: Real> SequenceBatch<R> {
    pub fn new(context: Tensor<R>, targets: Tensor<R>) -> Result<Self> {
        let (c, t) = (context.shape(), targets.shape());
        if c.len() != 5 || t.len() != 5 || c[0] != t[0] || c[2..] != t[2..] || c[1] == 0 || t[1] == 0 {
            return Err(Error::contract("SequenceBatch::new", format!("incompatible context {c:?} and targets {t:?}")));
        }
        Ok(Self { context, targets })
    }

    pub fn batch_size(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn context_len(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn cast<S: Real>(&self) -> SequenceBatch<S> {
        SequenceBatch { context: self.context.cast(), targets: self.targets.cast() }
    }
}

/// `[B, K, C, H, W]` to `[K * B, C, H, W]` with frame-major rows.
pub fn time_major<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    let s = t.shape();
    let (b, k, frame) = (s[0], s[1], s[2] * s[3] * s[4]);
    let mut out = Vec::with_capacity(t.numel());
    for ki in 0..k {
        for bi in 0..b {
            let start = (bi * k + ki) * frame;
            out.extend_from_slice(&t.data()[start..start + frame]);
        }
    }
    Tensor::new(&[k * b, s[2], s[3], s[4]], out).expect("time-major shape")
}

/// Recurrent state of every ConvLSTM in the model.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub prior: Vec<ConvLstmState>,
    pub posterior: Vec<ConvLstmState>,
    /// One entry per recurrent decoder stage, coarsest first.
    pub decoder: Vec<ConvLstmState>,
}

type Detached<R> = Vec<(Tensor<R>, Tensor<R>)>;

/// [`ModelState`] copied out of a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DetachedState<R: Real> {
    pub prior: Detached<R>,
    pub posterior: Detached<R>,
    pub decoder: Detached<R>,
}

impl ModelState {
    pub fn detach<R: Real>(&self, g: &Graph<R>) -> DetachedState<R> {
        let d = |v: &[ConvLstmState]| v.iter().map(|s| s.detach(g)).collect();
        DetachedState { prior: d(&self.prior), posterior: d(&self.posterior), decoder: d(&self.decoder) }
    }

    pub fn attach<R: Real>(g: &mut Graph<R>, d: &DetachedState<R>) -> Self {
        let mut a = |v: &Detached<R>| v.iter().map(|(h, c)| ConvLstmState::attach(g, h.clone(), c.clone())).collect();
        ModelState { prior: a(&d.prior), posterior: a(&d.posterior), decoder: a(&d.decoder) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Prior,
    Posterior,
}

#[derive(Clone, Copy, Debug)]
pub struct LevelSample {
    pub mode: Mode,
    pub sample: Var,
    pub params: Gaussian,
}

/// Per-level samples of one timestep.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub levels: Vec<LevelSample>,
}

impl LatentSample {
    fn new(mode: Mode, params: Vec<Gaussian>, samples: Vec<Var>) -> Self {
        Self { levels: params.into_iter().zip(samples).map(|(params, sample)| LevelSample { mode, sample, params }).collect() }
    }

    pub fn samples(&self) -> Vec<Var> {
        self.levels.iter().map(|l| l.sample).collect()
    }

    /// The single mode all levels were drawn in.
    pub fn mode(&self) -> Result<Mode> {
        let first = self.levels.first().ok_or_else(|| Error::contract("LatentSample", "no levels"))?.mode;
        if self.levels.iter().any(|l| l.mode != first) {
            return Err(Error::contract("decode_step", "latents mix prior and posterior samples"));
        }
        Ok(first)
    }
}

/// Components of one ELBO evaluation.
#[derive(Debug)]
pub struct ElboOutput {
    /// `sum_t recon_t + beta * sum_t sum_l kl_{t,l}`.
    pub loss: Var,
    pub beta: f64,
    /// Reconstruction term per timestep.
    pub recon: Vec<f64>,
    /// Summed KL per `[timestep][level]`.
    pub kl: Vec<Vec<f64>>,
    /// Per `[level][channel]`: KL averaged over batch and positions, summed over timesteps.
    pub kl_channels: Vec<Vec<f64>>,
    /// Predicted frames per timestep.
    pub predictions: Vec<Var>,
}

impl ElboOutput {
    pub fn recon_total(&self) -> f64 {
        self.recon.iter().sum()
    }

    /// Sum over timesteps of the KL of each level.
    pub fn kl_per_level(&self) -> Vec<f64> {
        let levels = self.kl.first().map_or(0, |r| r.len());
        (0..levels).map(|l| self.kl.iter().map(|r| r[l]).sum()).collect()
    }

    pub fn kl_total(&self) -> f64 {
        self.kl_per_level().iter().sum()
    }

    /// Negative ELBO with unit KL weight.
    pub fn nelbo(&self) -> f64 {
        self.recon_total() + self.kl_total()
    }
}

/// Hierarchical VRNN structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub prior: Ladder,
    pub posterior: Ladder,
    pub decoder: Decoder,
    pub init_prior: Vec<InitNet>,
    pub init_posterior: Vec<InitNet>,
    pub init_decoder: Vec<InitNet>,
    /// Whether the posterior reads the current frame (normal) or the previous one.
    pub posterior_sees_current: bool,
}

impl Model {
    /// Registers all parameters in a fresh store, initialized from `seed`.
    pub fn new<R: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<R>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let encoder = Encoder::new(&mut store, &mut rng, config)?;
        let prior = Ladder::new(&mut store, &mut rng, "prior", config)?;
        let posterior = Ladder::new(&mut store, &mut rng, "posterior", config)?;
        let decoder = Decoder::new(&mut store, &mut rng, config)?;
        let ladder_init = |store: &mut ParamStore<R>, rng: &mut SplitMix64, name: &str| -> Result<Vec<InitNet>> {
            (0..config.levels.len())
                .map(|l| {
                    let res = config.levels[l].resolution;
                    let z = config.latent_channels(l);
                    InitNet::new(store, rng, &format!("init.{name}.level{l}"), config.feature_channels(res), z, res)
                })
                .collect()
        };
        let init_prior = ladder_init(&mut store, &mut rng, "prior")?;
        let init_posterior = ladder_init(&mut store, &mut rng, "posterior")?;
        let init_decoder = decoder
            .recurrent_stages()
            .map(|(s, st, _)| {
                InitNet::new(&mut store, &mut rng, &format!("init.decoder.stage{s}"), st.channels, st.channels, st.resolution)
            })
            .collect::<Result<_>>()?;
        let model = Self {
            config: config.clone(),
            encoder,
            prior,
            posterior,
            decoder,
            init_prior,
            init_posterior,
            init_decoder,
            posterior_sees_current: true,
        };
        Ok((model, store))
    }

    /// Make the posterior an exact copy of the prior: same parameters, same
    /// (previous-frame) input. Its KL to the prior is then identically zero.
    pub fn tie_posterior_to_prior(&mut self) {
        self.posterior = self.prior.clone();
        self.init_posterior = self.init_prior.clone();
        self.posterior_sees_current = false;
    }

    pub fn encode_frame<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, frames: Var) -> Result<Pyramid> {
        self.encoder.forward(g, store, frames)
    }

    /// Initial states from the pyramid of `D` time-major context frames of a batch of `b`.
    pub fn init_states<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, context: &Pyramid, b: usize) -> Result<ModelState> {
        let rows = g.shape(context.maps[0].1)[0];
        if b == 0 || rows % b != 0 {
            return Err(Error::contract("init_states", format!("{rows} context rows for batch {b}")));
        }
        let d = rows / b;
        let mut maps = Vec::new();
        for &(r, v) in &context.maps {
            let mut acc = g.narrow(v, 0, 0, b)?;
            for k in 1..d {
                let f = g.narrow(v, 0, k * b, b)?;
                acc = g.add(acc, f)?;
            }
            maps.push((r, if d > 1 { g.scale(acc, 1.0 / d as f64)? } else { acc }));
        }
        let summary = Pyramid { maps };
        let run = |g: &mut Graph<R>, nets: &[InitNet]| nets.iter().map(|n| n.forward(g, store, &summary)).collect::<Result<Vec<_>>>();
        Ok(ModelState {
            prior: run(g, &self.init_prior)?,
            posterior: run(g, &self.init_posterior)?,
            decoder: run(g, &self.init_decoder)?,
        })
    }

    /// Ancestral sampling from the prior given the previous frame's features.
    pub fn prior_step<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        state: &mut ModelState,
        prev: &Pyramid,
        noise: &mut dyn NoiseSource,
    ) -> Result<LatentSample> {
        let (p, z, s) = self.prior.step(g, store, &state.prior, prev, Conditioning::Sample(noise))?;
        state.prior = s;
        Ok(LatentSample::new(Mode::Prior, p, z))
    }

    /// Prior distributions along a trajectory of given (posterior) samples.
    pub fn prior_given<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        state: &mut ModelState,
        prev: &Pyramid,
        samples: &[Var],
    ) -> Result<Vec<Gaussian>> {
        let (p, _, s) = self.prior.step(g, store, &state.prior, prev, Conditioning::Given(samples))?;
        state.prior = s;
        Ok(p)
    }

    /// Posterior sampling given the features of the frame being generated.
    pub fn posterior_step<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        state: &mut ModelState,
        current: &Pyramid,
        noise: &mut dyn NoiseSource,
    ) -> Result<LatentSample> {
        let (q, z, s) = self.posterior.step(g, store, &state.posterior, current, Conditioning::Sample(noise))?;
        state.posterior = s;
        Ok(LatentSample::new(Mode::Posterior, q, z))
    }

    pub fn decode_step<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        state: &mut ModelState,
        latents: &LatentSample,
        prev: &Pyramid,
    ) -> Result<Var> {
        latents.mode()?;
        if latents.levels.len() != self.config.levels.len() {
            return Err(Error::contract("decode_step", format!("{} latent levels for a {}-level model", latents.levels.len(), self.config.levels.len())));
        }
        let (frame, s) = self.decoder.forward(g, store, &state.decoder, &latents.samples(), prev)?;
        state.decoder = s;
        Ok(frame)
    }

    fn check_batch<R: Real>(&self, batch: &SequenceBatch<R>) -> Result<()> {
        let c = batch.context.shape();
        let f = self.config.frame_size;
        if c[2] != self.config.image_channels || c[3] != f || c[4] != f {
            return Err(Error::contract(
                "elbo",
                format!("frames {:?} do not match a {}x{f}x{f} model", &c[2..], self.config.image_channels),
            ));
        }
        Ok(())
    }

    /// Teacher-forced negative ELBO of a batch, with posterior samples.
    pub fn elbo<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        batch: &SequenceBatch<R>,
        beta: f64,
        noise: &mut dyn NoiseSource,
    ) -> Result<ElboOutput> {
        if !(beta >= 0.0) {
            return Err(Error::contract("elbo", format!("beta must be non-negative, got {beta}")));
        }
        self.check_batch(batch)?;
        let (b, d, t_len) = (batch.batch_size(), batch.context_len(), batch.horizon());
        let all = Tensor::concat(&[&time_major(&batch.context), &time_major(&batch.targets)], 0)?;
        let frames = g.constant(all);
        let pyr = self.encode_frame(g, store, frames)?;
        let ctx = pyr.narrow(g, 0, d * b)?;
        let mut state = self.init_states(g, store, &ctx, b)?;

        let levels = self.config.levels.len();
        let mut out = ElboOutput {
            loss: g.constant(Tensor::scalar(R::zero())),
            beta,
            recon: Vec::new(),
            kl: Vec::new(),
            kl_channels: (0..levels).map(|l| vec![0.0; self.config.latent_channels(l)]).collect(),
            predictions: Vec::new(),
        };
        let mut total: Option<Var> = None;
        for t in 0..t_len {
            let step = |e: Error| attribute(e, t);
            let prev = pyr.narrow(g, (d - 1 + t) * b, b).map_err(step)?;
            let cur = pyr.narrow(g, (d + t) * b, b).map_err(step)?;
            let q_input = if self.posterior_sees_current { &cur } else { &prev };
            let q = self.posterior_step(g, store, &mut state, q_input, noise).map_err(step)?;
            let p = self.prior_given(g, store, &mut state, &prev, &q.samples()).map_err(step)?;
            let pred = self.decode_step(g, store, &mut state, &q, &prev).map_err(step)?;
            let target = g.constant(batch.targets.narrow(1, t, 1)?.reshape(&[b, self.config.image_channels, self.config.frame_size, self.config.frame_size])?);
            let recon = dists::recon_nll(g, pred, target).map_err(step)?;

            let mut kl_sum: Option<Var> = None;
            let mut kl_row = Vec::new();
            for (l, (ql, pl)) in q.levels.iter().zip(&p).enumerate() {
                let at = |e: Error| attribute_level(e, t, l);
                let kl = dists::gaussian_kl(g, &ql.params, pl).map_err(at)?;
                accumulate_channels(g.value(kl), &mut out.kl_channels[l]);
                let s = g.sum(kl).map_err(at)?;
                let s = g.scale(s, 1.0 / b as f64).map_err(at)?;
                kl_row.push(g.value(s).data()[0].as_f64());
                kl_sum = Some(match kl_sum {
                    None => s,
                    Some(acc) => g.add(acc, s).map_err(at)?,
                });
            }
            let weighted = g.scale(kl_sum.expect("at least one level"), beta).map_err(step)?;
            let step_loss = g.add(recon, weighted).map_err(step)?;
            total = Some(match total {
                None => step_loss,
                Some(acc) => g.add(acc, step_loss).map_err(step)?,
            });
            out.recon.push(g.value(recon).data()[0].as_f64());
            out.kl.push(kl_row);
            out.predictions.push(pred);
        }
        out.loss = total.expect("horizon >= 1");
        Ok(out)
    }

    /// Autoregressive sampling from the prior: `[B, N, T, C, H, W]`.
    ///
    /// Sample `n` draws its noise from `derive_seed(seed, n)`; with
    /// `zero_noise` every sample follows the prior means.
    pub fn generate<R: Real>(
        &self,
        store: &ParamStore<R>,
        context: &Tensor<R>,
        horizon: usize,
        n_samples: usize,
        seed: u64,
        zero_noise: bool,
    ) -> Result<Tensor<R>> {
        if n_samples == 0 || horizon == 0 {
            return Err(Error::contract("generate", "need at least one sample and one step"));
        }
        let s = context.shape();
        if s.len() != 5 {
            return Err(Error::contract("generate", format!("context must be [B, D, C, H, W], got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[2], s[3], s[4]);
        let frame = c * h * w;
        let mut out = vec![R::zero(); b * n_samples * horizon * frame];
        for n in 0..n_samples {
            let mut noise: Box<dyn NoiseSource> =
                if zero_noise { Box::new(ZeroNoise) } else { Box::new(GaussianNoise::new(derive_seed(seed, n as u64))) };
            let frames = self.rollout(store, context, horizon, noise.as_mut())?;
            for (t, f) in frames.iter().enumerate() {
                for bi in 0..b {
                    let dst = ((bi * n_samples + n) * horizon + t) * frame;
                    out[dst..dst + frame].copy_from_slice(&f.data()[bi * frame..(bi + 1) * frame]);
                }
            }
        }
        Tensor::new(&[b, n_samples, horizon, c, h, w], out)
    }

    /// One sampled trajectory; each step uses a fresh graph.
    pub fn rollout<R: Real>(
        &self,
        store: &ParamStore<R>,
        context: &Tensor<R>,
        horizon: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<Tensor<R>>> {
        let s = context.shape();
        let (b, d) = (s[0], s[1]);
        let frame_shape = [b, s[2], s[3], s[4]];
        let mut g = Graph::new();
        let ctx = g.constant(time_major(context));
        let pyr = self.encode_frame(&mut g, store, ctx)?;
        let state = self.init_states(&mut g, store, &pyr, b)?;
        let mut detached = state.detach(&g);
        let mut prev = context.narrow(1, d - 1, 1)?.reshape(&frame_shape)?;
        let mut frames = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let mut g = Graph::new();
            let mut state = ModelState::attach(&mut g, &detached);
            let pv = g.constant(prev);
            let prev_pyr = self.encode_frame(&mut g, store, pv).map_err(|e| attribute(e, t))?;
            let z = self.prior_step(&mut g, store, &mut state, &prev_pyr, noise).map_err(|e| attribute(e, t))?;
            let x = self.decode_step(&mut g, store, &mut state, &z, &prev_pyr).map_err(|e| attribute(e, t))?;
            detached = state.detach(&g);
            prev = g.value(x).clone();
            frames.push(prev.clone());
        }
        Ok(frames)
    }
}

fn accumulate_channels<R: Real>(kl: &Tensor<R>, acc: &mut [f64]) {
    let s = kl.shape();
    let (b, c, p) = (s[0], s[1], s[2] * s[3]);
    for bi in 0..b {
        for (ci, a) in acc.iter_mut().enumerate().take(c) {
            let start = (bi * c + ci) * p;
            *a += kl.data()[start..start + p].iter().map(|v| v.as_f64()).sum::<f64>() / (b * p) as f64;
        }
    }
}

fn attribute(e: Error, t: usize) -> Error {
    match e {
        Error::Numeric { op, detail } if !op.contains(" at step ") => Error::Numeric { op: format!("{op} at step {t}"), detail },
        other => other,
    }
}

fn attribute_level(e: Error, t: usize, l: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric { op: format!("{op} at step {t}, level {l}"), detail },
        other => other,
    }
}

/// Detached parameters of every level, for inspection.
pub fn level_params<R: Real>(g: &Graph<R>, latents: &LatentSample) -> Vec<GaussianParams<R>> {
    latents.levels.iter().map(|l| l.params.params(g)).collect()
}
