use crate::diffcore::{Graph, ParamStore, Real, Var};
use crate::rng::SplitMix64;
use crate::Result;

use super::{Conv2d, Conv2dSpec, GroupNorm, GroupNormSpec};

/// `proj(x) + (ReLU -> Conv3x3 -> GroupNorm) x 2`, where `proj` is the identity
/// when channel counts match and a biased 1x1 convolution otherwise.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub proj: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut SplitMix64,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        resolution: usize,
    ) -> Result<Self> {
        let gn = GroupNormSpec::for_channels(out_channels, resolution);
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), Conv2dSpec::same3x3(in_channels, out_channels))?;
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), gn)?;
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), Conv2dSpec::same3x3(out_channels, out_channels))?;
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), gn)?;
        let proj = if in_channels != out_channels {
            Some(Conv2d::new(store, rng, &format!("{name}.proj"), Conv2dSpec::pointwise(in_channels, out_channels).with_bias())?)
        } else {
            None
        };
        Ok(Self { in_channels, out_channels, conv1, norm1, conv2, norm2, proj })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let h = g.relu(x)?;
        let h = self.conv1.forward(g, store, h)?;
        let h = self.norm1.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}
