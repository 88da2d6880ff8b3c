//! Seam for learned-feature metrics (FVD, LPIPS). Those need pretrained
//! networks, so no extractor ships with the crate.

use crate::diffcore::Tensor;
use crate::Result;

pub trait FeatureExtractor {
    fn name(&self) -> &str;
    /// Feature vector of a `[T, C, H, W]` clip.
    fn features(&self, clip: &Tensor<f32>) -> Result<Vec<f64>>;
}

/// Extractors available to the evaluation command.
pub fn registered_extractors() -> Vec<Box<dyn FeatureExtractor>> {
    Vec::new()
}
