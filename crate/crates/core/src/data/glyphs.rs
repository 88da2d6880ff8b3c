//! Stroke-font digits, used when no MNIST files are available.
//!
//! Each digit is a set of polylines in the unit square (x right, y down).
//! Samples vary in slant, scale, offset and stroke width, and are rendered
//! with a one-pixel anti-aliased edge.

use super::DigitSet;
use crate::rng::SplitMix64;

type Stroke = &'static [(f64, f64)];

const ZERO: [Stroke; 1] = [&[
    (0.5, 0.08), (0.68, 0.13), (0.78, 0.3), (0.8, 0.5), (0.78, 0.7), (0.68, 0.87), (0.5, 0.92),
    (0.32, 0.87), (0.22, 0.7), (0.2, 0.5), (0.22, 0.3), (0.32, 0.13), (0.5, 0.08),
]];
const ONE: [Stroke; 1] = [&[(0.35, 0.25), (0.52, 0.08), (0.52, 0.92)]];
const TWO: [Stroke; 1] = [&[(0.22, 0.28), (0.32, 0.12), (0.5, 0.08), (0.7, 0.13), (0.78, 0.3), (0.7, 0.47), (0.2, 0.9), (0.82, 0.9)]];
const THREE: [Stroke; 1] = [&[
    (0.22, 0.15), (0.5, 0.08), (0.74, 0.18), (0.72, 0.38), (0.45, 0.5), (0.74, 0.6), (0.78, 0.8), (0.5, 0.92), (0.2, 0.85),
]];
const FOUR: [Stroke; 1] = [&[(0.62, 0.92), (0.62, 0.08), (0.15, 0.65), (0.85, 0.65)]];
const FIVE: [Stroke; 1] = [&[(0.78, 0.1), (0.3, 0.1), (0.26, 0.45), (0.55, 0.4), (0.78, 0.55), (0.76, 0.8), (0.5, 0.92), (0.2, 0.86)]];
const SIX: [Stroke; 1] = [&[
    (0.7, 0.1), (0.42, 0.25), (0.26, 0.55), (0.3, 0.8), (0.5, 0.92), (0.72, 0.8), (0.73, 0.6), (0.5, 0.5), (0.28, 0.6),
]];
const SEVEN: [Stroke; 1] = [&[(0.2, 0.1), (0.8, 0.1), (0.42, 0.92)]];
const EIGHT: [Stroke; 2] = [
    &[(0.5, 0.08), (0.68, 0.14), (0.7, 0.3), (0.5, 0.46), (0.3, 0.3), (0.32, 0.14), (0.5, 0.08)],
    &[(0.5, 0.46), (0.74, 0.58), (0.76, 0.78), (0.5, 0.92), (0.24, 0.78), (0.26, 0.58), (0.5, 0.46)],
];
const NINE: [Stroke; 1] = [&[
    (0.72, 0.38), (0.5, 0.5), (0.3, 0.4), (0.3, 0.2), (0.5, 0.08), (0.72, 0.2), (0.72, 0.4), (0.62, 0.92),
]];

fn strokes(digit: usize) -> &'static [Stroke] {
    match digit {
        0 => &ZERO,
        1 => &ONE,
        2 => &TWO,
        3 => &THREE,
        4 => &FOUR,
        5 => &FIVE,
        6 => &SIX,
        7 => &SEVEN,
        8 => &EIGHT,
        _ => &NINE,
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

fn render(digit: usize, size: usize, rng: &mut SplitMix64) -> Vec<f32> {
    let s = size as f64;
    // The glyph box covers about 20/28 of the image, like centered MNIST digits.
    let scale = s * rng.uniform_in(0.6, 0.72);
    let slant = rng.uniform_in(-0.25, 0.25);
    let width = s / 28.0 * rng.uniform_in(1.1, 2.0);
    let ox = (s - scale) / 2.0 + rng.uniform_in(-0.05, 0.05) * s;
    let oy = (s - scale) / 2.0 + rng.uniform_in(-0.05, 0.05) * s;
    let map = |(x, y): (f64, f64)| (ox + scale * (x + slant * (0.5 - y)), oy + scale * y);
    let segs: Vec<_> = strokes(digit)
        .iter()
        .flat_map(|st| st.windows(2).map(move |w| (map(w[0]), map(w[1]))))
        .collect();
    let mut img = vec![0.0f32; size * size];
    for (i, px) in img.iter_mut().enumerate() {
        let p = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
        let d = segs.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min);
        *px = (1.0 - (d - width)).clamp(0.0, 1.0) as f32;
    }
    img
}

/// `count` synthetic digits cycling through 0..=9, deterministic in `seed`.
pub fn synthetic_digits(count: usize, size: usize, seed: u64) -> DigitSet {
    let mut rng = SplitMix64::new(seed);
    let images = (0..count).map(|i| render(i % 10, size, &mut rng)).collect();
    DigitSet { size, images, labels: Some((0..count).map(|i| (i % 10) as u8).collect()) }
}
