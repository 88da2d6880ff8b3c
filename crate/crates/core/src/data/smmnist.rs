use serde::{Deserialize, Serialize};

use super::DigitSet;
use crate::diffcore::Tensor;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Stochastic Moving MNIST generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmmnistConfig {
    pub canvas: usize,
    pub num_digits: usize,
    pub digit_size: usize,
    /// Speed range in pixels per frame.
    pub speed: [f64; 2],
    pub context_len: usize,
    pub horizon: usize,
    pub binarize: bool,
}

impl Default for SmmnistConfig {
    fn default() -> Self {
        Self { canvas: 64, num_digits: 2, digit_size: 28, speed: [2.0, 5.0], context_len: 5, horizon: 10, binarize: false }
    }
}

impl SmmnistConfig {
    pub fn seq_len(&self) -> usize {
        self.context_len + self.horizon
    }

    /// Largest valid top-left coordinate.
    pub fn max_pos(&self) -> f64 {
        (self.canvas - self.digit_size) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.digit_size == 0 || self.digit_size > self.canvas {
            return Err(Error::config("data.digit_size", format!("{} must be in 1..={}", self.digit_size, self.canvas)));
        }
        let [lo, hi] = self.speed;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("data.speed", format!("invalid range [{lo}, {hi}]")));
        }
        if self.num_digits == 0 {
            return Err(Error::config("data.num_digits", "must be >= 1"));
        }
        if self.context_len == 0 || self.horizon == 0 {
            return Err(Error::config("data.context_len", "context_len and horizon must be >= 1"));
        }
        Ok(())
    }
}

/// One digit's trajectory state; position is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DigitState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub digit: usize,
}

fn random_velocity(cfg: &SmmnistConfig, rng: &mut SplitMix64) -> (f64, f64) {
    let speed = rng.uniform_in(cfg.speed[0], cfg.speed[1]);
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    (speed * angle.cos(), speed * angle.sin())
}

/// Advance one frame. A digit leaving the canvas is clamped to the border and
/// given a fresh random speed and angle with the normal component pointing
/// back inside. Returns whether a bounce happened.
pub fn step_digit(s: &mut DigitState, cfg: &SmmnistConfig, rng: &mut SplitMix64) -> bool {
    let max = cfg.max_pos();
    s.x += s.vx;
    s.y += s.vy;
    // Inward direction per axis: +1 off the low border, -1 off the high one.
    let side = |p: f64| if p < 0.0 { 1.0 } else if p > max { -1.0 } else { 0.0 };
    let (nx, ny) = (side(s.x), side(s.y));
    if nx == 0.0 && ny == 0.0 {
        return false;
    }
    s.x = s.x.clamp(0.0, max);
    s.y = s.y.clamp(0.0, max);
    let (vx, vy) = random_velocity(cfg, rng);
    s.vx = if nx != 0.0 { nx * vx.abs() } else { vx };
    s.vy = if ny != 0.0 { ny * vy.abs() } else { vy };
    true
}

/// Per-frame digit states for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `states[t][k]` is digit `k` at frame `t`.
    pub states: Vec<Vec<DigitState>>,
    /// `bounced[t][k]`: digit `k` bounced on the step into frame `t`.
    pub bounced: Vec<Vec<bool>>,
}

/// Sample digits and run their trajectories for `D + T` frames.
pub fn simulate(cfg: &SmmnistConfig, num_available: usize, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    if num_available == 0 {
        return Err(Error::contract("generate_sequence", "digit set is empty"));
    }
    let mut rng = SplitMix64::new(seed);
    let max = cfg.max_pos();
    let mut cur: Vec<DigitState> = (0..cfg.num_digits)
        .map(|_| {
            let digit = rng.below(num_available as u64) as usize;
            let (x, y) = (rng.uniform_in(0.0, max), rng.uniform_in(0.0, max));
            let (vx, vy) = random_velocity(cfg, &mut rng);
            DigitState { x, y, vx, vy, digit }
        })
        .collect();
    let mut states = vec![cur.clone()];
    let mut bounced = vec![vec![false; cfg.num_digits]];
    for _ in 1..cfg.seq_len() {
        bounced.push(cur.iter_mut().map(|s| step_digit(s, cfg, &mut rng)).collect());
        states.push(cur.clone());
    }
    Ok(Trajectory { states, bounced })
}

/// Render a sequence as `[D + T, 1, canvas, canvas]` with values in [0, 1].
/// Overlapping digits combine by per-pixel max; positions round to whole pixels.
pub fn generate_sequence(cfg: &SmmnistConfig, digits: &DigitSet, seed: u64) -> Result<Tensor<f32>> {
    if digits.size != cfg.digit_size {
        return Err(Error::contract(
            "generate_sequence",
            format!("digit images are {0}x{0}, config expects {1}", digits.size, cfg.digit_size),
        ));
    }
    let traj = simulate(cfg, digits.len(), seed)?;
    let (c, d) = (cfg.canvas, cfg.digit_size);
    let mut out = Tensor::<f32>::zeros(&[cfg.seq_len(), 1, c, c]);
    for (t, frame) in out.data_mut().chunks_exact_mut(c * c).enumerate() {
        for s in &traj.states[t] {
            let (x0, y0) = (s.x.round() as usize, s.y.round() as usize);
            let img = &digits.images[s.digit];
            for i in 0..d {
                for j in 0..d {
                    let px = &mut frame[(y0 + i) * c + x0 + j];
                    *px = px.max(img[i * d + j]);
                }
            }
        }
        if cfg.binarize {
            frame.iter_mut().for_each(|v| *v = if *v > 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}
