//! Layers: convolutions, group normalization, residual blocks and the ConvLSTM cell.
//!
//! Layers hold [`ParamId`](crate::diffcore::ParamId)s into a shared
//! [`ParamStore`](crate::diffcore::ParamStore) and record their forward pass
//! on a [`Graph`](crate::diffcore::Graph).

mod conv;
mod convlstm;
mod norm;
mod residual;

pub use conv::{Conv2d, Conv2dSpec, ConvTranspose2d};
pub use convlstm::{ConvLstmCell, ConvLstmState};
pub use norm::{GroupNorm, GroupNormSpec, GN_EPS};
pub use residual::ResidualBlock;

use crate::diffcore::{Real, Tensor};
use crate::rng::SplitMix64;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<R: Real>(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor<R> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| R::lit(rng.uniform_in(-bound, bound)))
}
