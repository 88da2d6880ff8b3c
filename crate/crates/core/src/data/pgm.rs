//! Binary PGM (P5, maxval 255) images and the on-disk sequence layout:
//! one subdirectory per sequence holding zero-padded numbered frames.

use std::path::{Path, PathBuf};

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// Quantize values in [0, 1] (clamped) to bytes.
    pub fn from_unit(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::contract("Image::from_unit", format!("{} values for {width}x{height}", values.len())));
        }
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
    }

    /// Place images side by side; all must share a height.
    pub fn hstack(images: &[Image]) -> Result<Self> {
        let height = images.first().map_or(0, |i| i.height);
        if images.iter().any(|i| i.height != height) {
            return Err(Error::contract("Image::hstack", "images differ in height"));
        }
        let width = images.iter().map(|i| i.width).sum();
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for i in images {
                pixels.extend_from_slice(&i.pixels[r * i.width..(r + 1) * i.width]);
            }
        }
        Ok(Self { width, height, pixels })
    }
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8], context: &str) -> Result<Image> {
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<(String, usize)> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(context, pos as u64, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), start))
    };
    let (magic, _) = token(bytes)?;
    if magic != "P5" {
        return Err(Error::format(context, 0, format!("expected P5, found {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize> {
        let (t, at) = token(bytes)?;
        t.parse().map_err(|_| Error::format(context, at as u64, format!("bad {what} {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(context, pos as u64, format!("maxval {maxval} unsupported, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = width * height;
    if bytes.len() < start + need {
        return Err(Error::format(context, bytes.len() as u64, format!("truncated raster: {need} bytes expected")));
    }
    Ok(Image { width, height, pixels: bytes[start..start + need].to_vec() })
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

fn sorted_entries(dir: &Path, want_dir: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let keep = if want_dir { path.is_dir() } else { path.extension().is_some_and(|e| e == "pgm") };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Write `[S, 1, H, W]` sequences as `dir/seq_NNNNN/frame_NNN.pgm`.
pub fn save_sequence_dir(dir: &Path, sequences: &[Tensor<f32>]) -> Result<()> {
    for (i, seq) in sequences.iter().enumerate() {
        let (s, c, h, w) = seq.dims4()?;
        if c != 1 {
            return Err(Error::contract("save_sequence_dir", format!("expected 1 channel, got {c}")));
        }
        let sub = dir.join(format!("seq_{i:05}"));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for t in 0..s {
            let img = Image::from_unit(w, h, &seq.data()[t * h * w..(t + 1) * h * w])?;
            write_pgm(&sub.join(format!("frame_{t:03}.pgm")), &img)?;
        }
    }
    Ok(())
}

/// Read every sequence subdirectory of `dir` in name order.
pub fn load_sequence_dir(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    for sub in sorted_entries(dir, true)? {
        let frames = sorted_entries(&sub, false)?;
        let mut data = Vec::new();
        let mut dims = None;
        for f in &frames {
            let img = read_pgm(f)?;
            if *dims.get_or_insert((img.width, img.height)) != (img.width, img.height) {
                return Err(Error::format(f.display().to_string(), 0, "frame size differs within sequence"));
            }
            data.extend(img.to_unit());
        }
        let Some((w, h)) = dims else {
            return Err(Error::format(sub.display().to_string(), 0, "sequence directory has no frames"));
        };
        out.push(Tensor::new(&[frames.len(), 1, h, w], data)?);
    }
    Ok(out)
}
