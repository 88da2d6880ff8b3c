use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Encoder channels per stage at width 1.0, finest first; deeper stages reuse the last entry.
pub const ENCODER_CHANNELS: [usize; 6] = [64, 128, 256, 512, 512, 512];

/// One level of the latent ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    /// Spatial size of the level (1 for the top level).
    pub resolution: usize,
    /// Latent channels at width 1.0.
    pub channels: usize,
}

/// Named level layouts: "1", "1-8", "1-8-32", "1-8-16-32".
pub fn preset(name: &str) -> Result<Vec<Level>> {
    let resolutions: Vec<usize> = name
        .split('-')
        .map(|r| r.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config("model.preset", format!("`{name}` is not a preset name")))?;
    if !matches!(name, "1" | "1-8" | "1-8-32" | "1-8-16-32") {
        return Err(Error::config("model.preset", format!("unknown preset `{name}`; expected 1, 1-8, 1-8-32 or 1-8-16-32")));
    }
    Ok(resolutions.into_iter().map(|resolution| Level { resolution, channels: if resolution == 1 { 128 } else { 512 } }).collect())
}

/// `max(1, round(c * width))`.
pub fn scale_channels(c: usize, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(1)
}

/// Architecture of a hierarchical VRNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square frame side; a power of two, at least 8.
    pub frame_size: usize,
    pub image_channels: usize,
    /// Multiplier on every channel count, in `(0, 1]`.
    pub width: f64,
    /// Latent levels from coarsest to finest.
    pub levels: Vec<Level>,
    /// Context frames `D`.
    pub context_len: usize,
    /// Predicted frames `T`.
    pub horizon: usize,
    /// How many of the coarsest decoder stages are ConvLSTMs; the rest are
    /// plain convolutions.
    pub decoder_recurrent_stages: usize,
    /// Feed every coarser sample into each finer level.
    pub dense: bool,
}

impl ModelConfig {
    /// Desk-scale default: 32x32 frames, width 0.25, preset "1-8", D=5, T=10.
    pub fn desk() -> Self {
        Self {
            frame_size: 32,
            image_channels: 1,
            width: 0.25,
            levels: preset("1-8").expect("preset"),
            context_len: 5,
            horizon: 10,
            decoder_recurrent_stages: 5,
            dense: true,
        }
    }

    /// Number of decoder stages (resolutions 2, 4, ..., frame_size).
    pub fn num_stages(&self) -> usize {
        self.frame_size.trailing_zeros() as usize
    }

    /// Resolution of encoder stage `k` (stage 0 is full resolution).
    pub fn stage_resolution(&self, k: usize) -> usize {
        self.frame_size >> k
    }

    pub fn stage_channels(&self, k: usize) -> usize {
        scale_channels(ENCODER_CHANNELS[k.min(ENCODER_CHANNELS.len() - 1)], self.width)
    }

    /// Encoder feature channels at `resolution` (the 1x1 map has the 2x2 channels).
    pub fn feature_channels(&self, resolution: usize) -> usize {
        let r = resolution.max(2);
        self.stage_channels((self.frame_size / r).trailing_zeros() as usize)
    }

    pub fn latent_channels(&self, level: usize) -> usize {
        scale_channels(self.levels[level].channels, self.width)
    }

    /// Resolution of decoder stage `s`, coarsest first.
    pub fn decoder_resolution(&self, s: usize) -> usize {
        2 << s
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.frame_size;
        if h < 8 || !h.is_power_of_two() {
            return Err(Error::config("model.frame_size", format!("{h} is not a power of two >= 8")));
        }
        if self.image_channels == 0 {
            return Err(Error::config("model.image_channels", "must be positive"));
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(Error::config("model.width", format!("{} is outside (0, 1]", self.width)));
        }
        if self.levels.is_empty() {
            return Err(Error::config("model.levels", "at least one level is required"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.resolution == 0 || !l.resolution.is_power_of_two() || l.resolution > h {
                return Err(Error::config(
                    "model.levels",
                    format!("level {i} resolution {} is not in the encoder pyramid of a {h}x{h} frame", l.resolution),
                ));
            }
            if l.channels == 0 {
                return Err(Error::config("model.levels", format!("level {i} has no channels")));
            }
            if i > 0 && l.resolution <= self.levels[i - 1].resolution {
                return Err(Error::config("model.levels", "resolutions must strictly increase from coarse to fine"));
            }
        }
        if self.context_len == 0 {
            return Err(Error::config("model.context_len", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("model.horizon", "must be at least 1"));
        }
        if self.decoder_recurrent_stages > self.num_stages() {
            return Err(Error::config(
                "model.decoder_recurrent_stages",
                format!("{} exceeds the {} decoder stages", self.decoder_recurrent_stages, self.num_stages()),
            ));
        }
        Ok(())
    }
}
