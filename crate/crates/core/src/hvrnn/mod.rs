//! The hierarchical conditional VRNN: frame encoder, prior and posterior
//! latent ladders, decoder, initial-state networks, ELBO and sampling.

mod config;
mod layers;
mod model;
mod noise;

pub use config::{preset, scale_channels, Level, ModelConfig, ENCODER_CHANNELS};
pub use layers::{Conditioning, Decoder, DecoderStage, Encoder, InitNet, Ladder, LadderLevel, Pyramid, StageBody};
pub use model::{
    level_params, time_major, DetachedState, ElboOutput, LatentSample, LevelSample, Mode, Model, ModelState, SequenceBatch,
};
pub use noise::{FixedNoise, GaussianNoise, NoiseSource, RecordingNoise, ZeroNoise};
