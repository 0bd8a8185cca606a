//! Patch-distribution fidelity and sample-set diversity.

pub mod diversity;
pub mod extractor;
pub mod frechet;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::io::config::CoefficientMode;
pub use diversity::{diversity, diversity_coefficient, diversity_from_pairs, perceptual_distance, DiversityReport};
pub use extractor::{load_extractor_weights, ExtractorSpec, FeatureExtractor};
pub use frechet::{fit_stats, frechet_distance, FeatureStats, FrechetDistance};

/// Frechet distance between the patch features of two images, with details.
pub fn sifid_report<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, extractor: &FeatureExtractor) -> Result<FrechetDistance> {
    let fx = fit_stats(&extractor.extract_patch_features(x)?)?;
    let fy = fit_stats(&extractor.extract_patch_features(y)?)?;
    frechet_distance(&fx, &fy)
}

/// Single-image Frechet distance, clipped at zero.
pub fn sifid<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, extractor: &FeatureExtractor) -> Result<f64> {
    Ok(sifid_report(x, y, extractor)?.value)
}
