use std::path::Path;

use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Square grayscale digit images with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct DigitSet {
    /// Side length in pixels.
    pub size: usize,
    /// Row-major `size * size` images.
    pub images: Vec<Vec<f32>>,
    pub labels: Option<Vec<u8>>,
}

impl DigitSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Area-average resampling to `size x size` (each output pixel is the
    /// mean of the input region it covers). Preserves image means.
    pub fn resized(&self, size: usize) -> Result<DigitSet> {
        if size == 0 {
            return Err(Error::config("data.digit_size", "must be positive"));
        }
        if size == self.size {
            return Ok(self.clone());
        }
        let weights = area_weights(self.size, size);
        let images = self
            .images
            .iter()
            .map(|img| {
                let mut out = vec![0.0f32; size * size];
                for (oy, wy) in weights.iter().enumerate() {
                    for (ox, wx) in weights.iter().enumerate() {
                        let mut acc = 0.0f64;
                        for &(iy, ay) in wy {
                            for &(ix, ax) in wx {
                                acc += ay * ax * img[iy * self.size + ix] as f64;
                            }
                        }
                        out[oy * size + ox] = acc as f32;
                    }
                }
                out
            })
            .collect();
        Ok(DigitSet { size, images, labels: self.labels.clone() })
    }
}

/// Per output index, the input indices it covers with normalized overlap weights.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(from))
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / scale;
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect()
}

fn be_u32(bytes: &[u8], offset: usize, context: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(context, offset as u64, "truncated header"))
}

/// Parse an IDX image file (`count x rows x cols` unsigned bytes).
pub fn parse_idx_images(bytes: &[u8], context: &str) -> Result<DigitSet> {
    let magic = be_u32(bytes, 0, context)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(context, 0, format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, context)? as usize;
    let rows = be_u32(bytes, 8, context)? as usize;
    let cols = be_u32(bytes, 12, context)? as usize;
    if rows != cols || rows == 0 {
        return Err(Error::format(context, 8, format!("expected square images, got {rows}x{cols}")));
    }
    let body = &bytes[16..];
    let need = count * rows * cols;
    if body.len() < need {
        return Err(Error::format(context, (16 + body.len()) as u64, format!("truncated: {need} pixel bytes declared, {} present", body.len())));
    }
    let images = body[..need].chunks_exact(rows * cols).map(|c| c.iter().map(|&b| f32::from(b) / 255.0).collect()).collect();
    Ok(DigitSet { size: rows, images, labels: None })
}

/// Parse an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], context: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, context)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(context, 0, format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, context)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(context, (8 + body.len()) as u64, format!("truncated: {count} labels declared, {} present", body.len())));
    }
    Ok(body[..count].to_vec())
}

/// Read an MNIST image file and its label file.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<DigitSet> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let mut set = parse_idx_images(&read(images)?, &images.display().to_string())?;
    let lab = parse_idx_labels(&read(labels)?, &labels.display().to_string())?;
    if lab.len() != set.len() {
        return Err(Error::format(
            labels.display().to_string(),
            4,
            format!("{} labels for {} images", lab.len(), set.len()),
        ));
    }
    set.labels = Some(lab);
    Ok(set)
}
