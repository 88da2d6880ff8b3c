use std::collections::VecDeque;

use crate::diffcore::{Real, Tensor};
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Supplies the standard-normal draws consumed by sampling.
pub trait NoiseSource {
    fn draw(&mut self, shape: &[usize]) -> Result<Vec<f64>>;
}

pub(crate) fn draw_tensor<R: Real>(noise: &mut dyn NoiseSource, shape: &[usize]) -> Result<Tensor<R>> {
    let v = noise.draw(shape)?;
    Tensor::new(shape, v.into_iter().map(R::lit).collect())
}

/// Seeded Gaussian noise.
#[derive(Clone, Debug)]
pub struct GaussianNoise(pub SplitMix64);

impl GaussianNoise {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::new(seed))
    }
}

impl NoiseSource for GaussianNoise {
    fn draw(&mut self, shape: &[usize]) -> Result<Vec<f64>> {
        let n: usize = shape.iter().product();
        Ok((0..n).map(|_| self.0.normal()).collect())
    }
}

/// All-zero noise: samples collapse to the distribution means.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, shape: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![0.0; shape.iter().product()])
    }
}

/// Pre-recorded draws, consumed in order.
#[derive(Clone, Debug, Default)]
pub struct FixedNoise {
    queue: VecDeque<Tensor<f64>>,
}

impl FixedNoise {
    pub fn new(draws: impl IntoIterator<Item = Tensor<f64>>) -> Self {
        Self { queue: draws.into_iter().collect() }
    }
}

impl NoiseSource for FixedNoise {
    fn draw(&mut self, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self.queue.pop_front().ok_or_else(|| Error::contract("noise", "no noise left for a latent level"))?;
        if t.shape() != shape {
            return Err(Error::contract("noise", format!("recorded draw has shape {:?}, level needs {shape:?}", t.shape())));
        }
        Ok(t.into_data())
    }
}

/// Records every draw of an inner source, so it can be replayed.
#[derive(Debug)]
pub struct RecordingNoise<N> {
    pub inner: N,
    pub draws: Vec<Tensor<f64>>,
}

impl<N: NoiseSource> RecordingNoise<N> {
    pub fn new(inner: N) -> Self {
        Self { inner, draws: Vec::new() }
    }
}

impl<N: NoiseSource> NoiseSource for RecordingNoise<N> {
    fn draw(&mut self, shape: &[usize]) -> Result<Vec<f64>> {
        let v = self.inner.draw(shape)?;
        self.draws.push(Tensor::new(shape, v.clone())?);
        Ok(v)
    }
}
