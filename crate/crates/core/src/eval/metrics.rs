use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ssim,
    Psnr,
    Mse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ssim, Metric::Psnr, Metric::Mse];

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mse)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr",
            Metric::Mse => "mse",
        }
    }

    /// Score of one frame pair.
    pub fn eval(self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        match self {
            Metric::Ssim => ssim(a, b),
            Metric::Psnr => psnr(a, b),
            Metric::Mse => mse(a, b),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config("eval.metrics", format!("unknown metric `{s}` (expected ssim, psnr or mse)")))
    }
}

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::contract(op, format!("shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB for range 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained windows and channels. Frames are
/// `[C, H, W]` (or `[H, W]`); the 11x11 Gaussian window (sigma 1.5) shrinks
/// to the frame size on smaller frames.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::contract("ssim", format!("expected [C, H, W] frames, got {s:?}"))),
    };
    let (kh, kw) = (WINDOW.min(h), WINDOW.min(w));
    let (gh, gw) = (gaussian_window(kh), gaussian_window(kw));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &a.data()[ch * h * w..(ch + 1) * h * w];
        let y = &b.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..=h - kh {
            for j in 0..=w - kw {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (u, &wu) in gh.iter().enumerate() {
                    for (v, &wv) in gw.iter().enumerate() {
                        let k = wu * wv;
                        let (p, q) = (x[(i + u) * w + j + v] as f64, y[(i + u) * w + j + v] as f64);
                        mx += k * p;
                        my += k * q;
                        xx += k * (p * p);
                        yy += k * (q * q);
                        xy += k * (p * q);
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                let num = (2.0 * mx * my + C1) * (2.0 * cxy + C2);
                let den = (mx * mx + my * my + C1) * (vx + vy + C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
