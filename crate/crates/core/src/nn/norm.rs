use crate::diffcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Error, Result};

pub const GN_EPS: f64 = 1e-5;

/// Preferred group count; reduced to the largest divisor of the channel count.
const MAX_GROUPS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupNormSpec {
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormSpec {
    /// Up to 16 groups, or a single group for maps with one spatial position.
    pub fn for_channels(channels: usize, resolution: usize) -> Self {
        let groups = if resolution == 1 { 1 } else { (1..=MAX_GROUPS.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1) };
        Self { channels, groups, eps: GN_EPS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::contract("group_norm", format!("{} groups do not divide {} channels", self.groups, self.channels)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub spec: GroupNormSpec,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, spec: GroupNormSpec) -> Result<Self> {
        spec.validate()?;
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[spec.channels], R::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[spec.channels]))?;
        Ok(Self { spec, gamma, beta })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let spatial: usize = shape.get(2..).map_or(1, |s| s.iter().product());
        if spatial == 1 && self.spec.groups != 1 {
            return Err(Error::contract("group_norm", "1x1 maps must use a single group"));
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.spec.groups, self.spec.eps)
    }
}
