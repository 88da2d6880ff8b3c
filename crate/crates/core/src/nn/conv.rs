use crate::diffcore::{Graph, ParamId, ParamStore, Real, Var};
use crate::rng::SplitMix64;
use crate::{Error, Result};

use super::fan_in_uniform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// 3x3, stride 1, padding 1.
    pub fn same3x3(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, kernel: (3, 3), stride: 1, padding: 1, bias: false }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, kernel: (1, 1), stride: 1, padding: 0, bias: false }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    /// `floor((n + 2p - k) / s) + 1` per axis; errors if either is empty.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |n: usize, k: usize| {
            let padded = n + 2 * self.padding;
            (padded >= k && self.stride > 0).then(|| (padded - k) / self.stride + 1)
        };
        match (out(h, self.kernel.0), out(w, self.kernel.1)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::contract("conv2d", format!("degenerate output for {h}x{w} input with {self:?}"))),
        }
    }
}

/// 2-D cross-correlation layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<R: Real>(store: &mut ParamStore<R>, rng: &mut SplitMix64, name: &str, spec: Conv2dSpec) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[spec.out_channels, spec.in_channels, kh, kw], fan_in),
        )?;
        let bias = if spec.bias {
            Some(store.add(format!("{name}.bias"), fan_in_uniform(rng, &[spec.out_channels], fan_in))?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.spec.stride, self.spec.padding)
    }
}

/// Transposed convolution with the fixed 4x4 / stride 2 / padding 1
/// geometry, which doubles the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvTranspose2d {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;
    pub const PADDING: usize = 1;

    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut SplitMix64,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    ) -> Result<Self> {
        let k = Self::KERNEL;
        // Each output pixel receives k*k/stride^2 taps per input channel.
        let fan_in = in_channels * k * k / (Self::STRIDE * Self::STRIDE);
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, &[in_channels, out_channels, k, k], fan_in))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), fan_in_uniform(rng, &[out_channels], fan_in))?)
        } else {
            None
        };
        Ok(Self { in_channels, out_channels, weight, bias })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv_transpose2d(x, w, b, Self::STRIDE, Self::PADDING)
    }
}

