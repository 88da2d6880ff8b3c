use crate::diffcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::rng::SplitMix64;
use crate::{Error, Result};

use super::{Conv2d, Conv2dSpec, GroupNorm, GroupNormSpec};

/// Recurrent state of one ConvLSTM, `[B, C, H, W]` each.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl ConvLstmState {
    pub fn zeros<R: Real>(g: &mut Graph<R>, shape: &[usize]) -> Self {
        Self { hidden: g.constant(Tensor::zeros(shape)), cell: g.constant(Tensor::zeros(shape)) }
    }

    /// Copy the current values out of the graph.
    pub fn detach<R: Real>(&self, g: &Graph<R>) -> (Tensor<R>, Tensor<R>) {
        (g.value(self.hidden).clone(), g.value(self.cell).clone())
    }

    /// Re-enter detached values into a (usually fresh) graph.
    pub fn attach<R: Real>(g: &mut Graph<R>, hidden: Tensor<R>, cell: Tensor<R>) -> Self {
        Self { hidden: g.constant(hidden), cell: g.constant(cell) }
    }
}

/// ConvLSTM with gates stacked as (i, f, g, o).
///
/// One 3x3 convolution over `concat(x, hidden)` produces all four gate
/// pre-activations, which are group-normalized jointly before splitting. The
/// normalization shift acts as the gate bias; the forget-gate shift starts at 1.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvLstmCell {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut SplitMix64,
        name: &str,
        input_channels: usize,
        hidden_channels: usize,
        resolution: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.gates"),
            Conv2dSpec::same3x3(input_channels + hidden_channels, 4 * hidden_channels),
        )?;
        let norm = GroupNorm::new(store, &format!("{name}.norm"), GroupNormSpec::for_channels(4 * hidden_channels, resolution))?;
        let beta = store.get_mut(norm.beta).value_mut();
        beta.data_mut()[hidden_channels..2 * hidden_channels].iter_mut().for_each(|b| *b = R::one());
        Ok(Self { input_channels, hidden_channels, conv, norm })
    }

    pub fn step<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var, state: ConvLstmState) -> Result<ConvLstmState> {
        let xs = g.shape(x).to_vec();
        let hs = g.shape(state.hidden).to_vec();
        if xs.len() != 4 || hs.len() != 4 || xs[0] != hs[0] || xs[2..] != hs[2..] || g.shape(state.cell) != hs.as_slice() {
            return Err(Error::contract("convlstm_step", format!("input {xs:?} not aligned with state {hs:?}")));
        }
        if xs[1] != self.input_channels || hs[1] != self.hidden_channels {
            return Err(Error::contract(
                "convlstm_step",
                format!(
                    "expected {} input and {} hidden channels, got {} and {}",
                    self.input_channels, self.hidden_channels, xs[1], hs[1]
                ),
            ));
        }
        let joint = g.concat(&[x, state.hidden], 1)?;
        let pre = self.conv.forward(g, store, joint)?;
        let pre = self.norm.forward(g, store, pre)?;
        let gates = g.chunk(pre, 4, 1)?;
        let i = g.sigmoid(gates[0])?;
        let f = g.sigmoid(gates[1])?;
        let cand = g.tanh(gates[2])?;
        let o = g.sigmoid(gates[3])?;
        let keep = g.mul(f, state.cell)?;
        let write = g.mul(i, cand)?;
        let cell = g.add(keep, write)?;
        let tc = g.tanh(cell)?;
        let hidden = g.mul(o, tc)?;
        Ok(ConvLstmState { hidden, cell })
    }
}
