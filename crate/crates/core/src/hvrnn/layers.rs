//! Building blocks of the model: frame encoder, latent ladder, decoder and
//! initial-state networks.

use crate::diffcore::{Graph, ParamStore, Real, Var};
use crate::dists::{self, Gaussian};
use crate::nn::{Conv2d, Conv2dSpec, ConvLstmCell, ConvLstmState, ConvTranspose2d, GroupNorm, GroupNormSpec, ResidualBlock};
use crate::rng::SplitMix64;
use crate::{Error, Result};

use super::config::ModelConfig;
use super::noise::{draw_tensor, NoiseSource};

/// Encoder features of a batch of frames, one map per resolution.
#[derive(Clone, Debug)]
pub struct Pyramid {
    /// `(resolution, map)`, finest first; the last entry is the pooled 1x1 map.
    pub maps: Vec<(usize, Var)>,
}

impl Pyramid {
    pub fn get(&self, resolution: usize) -> Result<Var> {
        self.maps
            .iter()
            .find(|(r, _)| *r == resolution)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::contract("pyramid", format!("no feature map at resolution {resolution}")))
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.maps.iter().map(|(r, _)| *r).collect()
    }

    /// Rows `start..start + len` of every map.
    pub fn narrow<R: Real>(&self, g: &mut Graph<R>, start: usize, len: usize) -> Result<Pyramid> {
        let maps = self.maps.iter().map(|&(r, v)| Ok((r, g.narrow(v, 0, start, len)?))).collect::<Result<_>>()?;
        Ok(Pyramid { maps })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub frame_size: usize,
    pub image_channels: usize,
    pub stem: Conv2d,
    /// Stage 0 runs at full resolution; each later stage pools first.
    pub stages: Vec<Vec<ResidualBlock>>,
}

impl Encoder {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Result<Self> {
        let c0 = cfg.stage_channels(0);
        let stem = Conv2d::new(store, rng, "encoder.stem", Conv2dSpec::same3x3(cfg.image_channels, c0).with_bias())?;
        let mut stages = Vec::new();
        for k in 0..cfg.num_stages() {
            let (res, c) = (cfg.stage_resolution(k), cfg.stage_channels(k));
            let blocks = if k == 0 {
                vec![ResidualBlock::new(store, rng, "encoder.stage0.block0", c0, c0, res)?]
            } else {
                let prev = cfg.stage_channels(k - 1);
                vec![
                    ResidualBlock::new(store, rng, &format!("encoder.stage{k}.block0"), prev, c, res)?,
                    ResidualBlock::new(store, rng, &format!("encoder.stage{k}.block1"), c, c, res)?,
                ]
            };
            stages.push(blocks);
        }
        Ok(Self { frame_size: cfg.frame_size, image_channels: cfg.image_channels, stem, stages })
    }

    /// `frames: [N, C, H, W]` to a pyramid over `H, H/2, ..., 2, 1`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, frames: Var) -> Result<Pyramid> {
        let s = g.shape(frames);
        if s.len() != 4 || s[1] != self.image_channels || s[2] != self.frame_size || s[3] != self.frame_size {
            return Err(Error::contract(
                "encode_frame",
                format!("expected [N, {}, {}, {}], got {s:?}", self.image_channels, self.frame_size, self.frame_size),
            ));
        }
        let mut h = self.stem.forward(g, store, frames)?;
        let mut maps = Vec::new();
        for (k, blocks) in self.stages.iter().enumerate() {
            if k > 0 {
                h = g.max_pool2d(h)?;
            }
            for b in blocks {
                h = b.forward(g, store, h)?;
            }
            maps.push((self.frame_size >> k, h));
        }
        let top = g.global_avg_pool(h)?;
        maps.push((1, top));
        Ok(Pyramid { maps })
    }
}

/// Small network mapping context features to a ConvLSTM's `(hidden, cell)`.
#[derive(Clone, Debug)]
pub struct InitNet {
    pub resolution: usize,
    pub hidden: usize,
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
}

impl InitNet {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut SplitMix64,
        name: &str,
        features: usize,
        hidden: usize,
        resolution: usize,
    ) -> Result<Self> {
        Ok(Self {
            resolution,
            hidden,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), Conv2dSpec::pointwise(features, features))?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), GroupNormSpec::for_channels(features, resolution))?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), Conv2dSpec::pointwise(features, 2 * hidden))?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), GroupNormSpec::for_channels(2 * hidden, resolution))?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, ctx: &Pyramid) -> Result<ConvLstmState> {
        let x = ctx.get(self.resolution)?;
        let h = self.conv1.forward(g, store, x)?;
        let h = self.norm1.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let parts = g.chunk(h, 2, 1)?;
        Ok(ConvLstmState { hidden: parts[0], cell: parts[1] })
    }
}

/// One level of a prior or posterior ladder.
#[derive(Clone, Debug)]
pub struct LadderLevel {
    pub resolution: usize,
    pub latent: usize,
    pub input: Conv2d,
    pub input_norm: GroupNorm,
    pub cell: ConvLstmCell,
    pub head: Conv2d,
    pub head_norm: GroupNorm,
}

/// Where the coarser-level samples feeding each level come from.
pub enum Conditioning<'a> {
    /// Draw this ladder's own samples with the given noise.
    Sample(&'a mut dyn NoiseSource),
    /// Condition on samples drawn elsewhere (the prior during training).
    Given(&'a [Var]),
}

#[derive(Clone, Debug)]
pub struct Ladder {
    pub levels: Vec<LadderLevel>,
    pub dense: bool,
}

impl Ladder {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut SplitMix64, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut levels = Vec::new();
        for (l, lv) in cfg.levels.iter().enumerate() {
            let (res, z) = (lv.resolution, cfg.latent_channels(l));
            let coarser: usize = if cfg.dense { (0..l).map(|k| cfg.latent_channels(k)).sum() } else { 0 };
            let inputs = cfg.feature_channels(res) + coarser;
            let p = format!("{name}.level{l}");
            levels.push(LadderLevel {
                resolution: res,
                latent: z,
                input: Conv2d::new(store, rng, &format!("{p}.input"), Conv2dSpec::pointwise(inputs, z))?,
                input_norm: GroupNorm::new(store, &format!("{p}.input_norm"), GroupNormSpec::for_channels(z, res))?,
                cell: ConvLstmCell::new(store, rng, &format!("{p}.convlstm"), z, z, res)?,
                head: Conv2d::new(store, rng, &format!("{p}.head"), Conv2dSpec::pointwise(z, 2 * z))?,
                head_norm: GroupNorm::new(store, &format!("{p}.head_norm"), GroupNormSpec::for_channels(2 * z, res))?,
            });
        }
        Ok(Self { levels, dense: cfg.dense })
    }

    /// Run the levels top-down on `features`; returns per-level distributions,
    /// the samples used for conditioning, and the new recurrent states.
    pub fn step<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        states: &[ConvLstmState],
        features: &Pyramid,
        mut cond: Conditioning<'_>,
    ) -> Result<(Vec<Gaussian>, Vec<Var>, Vec<ConvLstmState>)> {
        if states.len() != self.levels.len() {
            return Err(Error::contract("ladder_step", format!("{} states for {} levels", states.len(), self.levels.len())));
        }
        if let Conditioning::Given(z) = &cond {
            if z.len() != self.levels.len() {
                return Err(Error::contract("ladder_step", format!("{} samples for {} levels", z.len(), self.levels.len())));
            }
        }
        let (mut dists_out, mut samples, mut new_states) = (Vec::new(), Vec::<Var>::new(), Vec::new());
        for (l, lv) in self.levels.iter().enumerate() {
            let mut parts = vec![features.get(lv.resolution)?];
            if self.dense {
                for (k, &z) in samples.iter().enumerate() {
                    let factor = lv.resolution / self.levels[k].resolution;
                    parts.push(g.upsample_nearest(z, factor)?);
                }
            }
            let x = g.concat(&parts, 1)?;
            let x = lv.input.forward(g, store, x)?;
            let x = lv.input_norm.forward(g, store, x)?;
            let s = lv.cell.step(g, store, x, states[l])?;
            let h = lv.head.forward(g, store, s.hidden)?;
            let h = lv.head_norm.forward(g, store, h)?;
            let q = Gaussian::from_stacked(g, h)?;
            let z = match &mut cond {
                Conditioning::Sample(noise) => {
                    let shape = g.shape(q.mean).to_vec();
                    let eps = draw_tensor::<R>(&mut **noise, &shape).map_err(|e| level_error(e, l))?;
                    let eps = g.constant(eps);
                    dists::reparam_sample(g, &q, eps)?
                }
                Conditioning::Given(z) => {
                    if g.shape(z[l]) != g.shape(q.mean) {
                        return Err(Error::contract("ladder_step", format!("sample for level {l} has the wrong shape")));
                    }
                    z[l]
                }
            };
            dists_out.push(q);
            samples.push(z);
            new_states.push(s);
        }
        Ok((dists_out, samples, new_states))
    }
}

fn level_error(e: Error, l: usize) -> Error {
    match e {
        Error::Contract { op, detail } => Error::Contract { op, detail: format!("level {l}: {detail}") },
        other => other,
    }
}

#[derive(Clone, Debug)]
pub enum StageBody {
    Recurrent(ConvLstmCell),
    Conv { conv: Conv2d, norm: GroupNorm },
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub resolution: usize,
    pub channels: usize,
    pub up: Option<ConvTranspose2d>,
    /// Latent levels injected at this stage.
    pub latents: Vec<usize>,
    pub body: StageBody,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
    pub out_conv: Conv2d,
    pub out_norm: GroupNorm,
    pub out_proj: Conv2d,
}

impl Decoder {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Result<Self> {
        let mut stages: Vec<DecoderStage> = Vec::new();
        for s in 0..cfg.num_stages() {
            let res = cfg.decoder_resolution(s);
            let c = cfg.feature_channels(res);
            let name = format!("decoder.stage{s}");
            let up = match stages.last() {
                Some(prev) => Some(ConvTranspose2d::new(store, rng, &format!("{name}.up"), prev.channels, c, true)?),
                None => None,
            };
            let latents: Vec<usize> = (0..cfg.levels.len())
                .filter(|&l| cfg.levels[l].resolution == res || (s == 0 && cfg.levels[l].resolution == 1))
                .collect();
            let inputs = up.as_ref().map_or(0, |_| c) + c + latents.iter().map(|&l| cfg.latent_channels(l)).sum::<usize>();
            let body = if s < cfg.decoder_recurrent_stages {
                StageBody::Recurrent(ConvLstmCell::new(store, rng, &format!("{name}.convlstm"), inputs, c, res)?)
            } else {
                StageBody::Conv {
                    conv: Conv2d::new(store, rng, &format!("{name}.conv"), Conv2dSpec::same3x3(inputs, c))?,
                    norm: GroupNorm::new(store, &format!("{name}.norm"), GroupNormSpec::for_channels(c, res))?,
                }
            };
            stages.push(DecoderStage { resolution: res, channels: c, up, latents, body });
        }
        let (res, c) = (cfg.frame_size, cfg.feature_channels(cfg.frame_size));
        Ok(Self {
            stages,
            out_conv: Conv2d::new(store, rng, "decoder.out.conv", Conv2dSpec::same3x3(c, c))?,
            out_norm: GroupNorm::new(store, "decoder.out.norm", GroupNormSpec::for_channels(c, res))?,
            out_proj: Conv2d::new(store, rng, "decoder.out.proj", Conv2dSpec::pointwise(c, cfg.image_channels).with_bias())?,
        })
    }

    pub fn recurrent_stages(&self) -> impl Iterator<Item = (usize, &DecoderStage, &ConvLstmCell)> {
        self.stages.iter().enumerate().filter_map(|(s, st)| match &st.body {
            StageBody::Recurrent(c) => Some((s, st, c)),
            StageBody::Conv { .. } => None,
        })
    }

    /// Coarse-to-fine decoding of one frame; returns the frame (in `[0, 1]`)
    /// and the new states of the recurrent stages.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        states: &[ConvLstmState],
        latents: &[Var],
        prev: &Pyramid,
    ) -> Result<(Var, Vec<ConvLstmState>)> {
        let mut h: Option<Var> = None;
        let mut new_states = Vec::new();
        let mut states = states.iter();
        for st in &self.stages {
            let mut parts = Vec::new();
            if let (Some(up), Some(prev_h)) = (&st.up, h) {
                parts.push(up.forward(g, store, prev_h)?);
            }
            parts.push(prev.get(st.resolution)?);
            for &l in &st.latents {
                let z = latents[l];
                let factor = st.resolution / g.shape(z)[2];
                parts.push(g.upsample_nearest(z, factor)?);
            }
            let x = g.concat(&parts, 1)?;
            h = Some(match &st.body {
                StageBody::Recurrent(cell) => {
                    let s = states
                        .next()
                        .copied()
                        .ok_or_else(|| Error::contract("decode_step", "missing decoder state"))?;
                    let s = cell.step(g, store, x, s)?;
                    new_states.push(s);
                    s.hidden
                }
                StageBody::Conv { conv, norm } => {
                    let y = conv.forward(g, store, x)?;
                    let y = norm.forward(g, store, y)?;
                    g.relu(y)?
                }
            });
        }
        let h = h.expect("at least one stage");
        let y = self.out_conv.forward(g, store, h)?;
        let y = self.out_norm.forward(g, store, y)?;
        let y = g.relu(y)?;
        let y = self.out_proj.forward(g, store, y)?;
        Ok((g.sigmoid(y)?, new_states))
    }
}
