//! Mean pairwise perceptual distance over a sample set.

use crate::error::{Error, Result};
use crate::io::config::CoefficientMode;
use crate::metrics::extractor::FeatureExtractor;
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

const UNIT_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub n: usize,
    /// `(i, j, d(x_i, x_j))` for every `i < j`.
    pub pairwise: Vec<(usize, usize, f64)>,
    pub pair_sum: f64,
    pub mean_diversity: f64,
    pub coefficient_mode: CoefficientMode,
}

/// Scales each pixel's channel vector to unit length.
fn unit_normalize(map: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = map.shape();
    let mut out = map.clone();
    for p in 0..h * w {
        let norm = (0..c).map(|ci| map.channel(ci)[p].powi(2)).sum::<f64>().sqrt();
        for ci in 0..c {
            out.channel_mut(ci)[p] /= norm + UNIT_EPS;
        }
    }
    out
}

fn layer_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    sq / a.plane() as f64
}

fn normalized_maps<T: Scalar>(extractor: &FeatureExtractor, image: &Tensor<T>) -> Result<Vec<Tensor<f64>>> {
    Ok(extractor.layer_maps(image)?.iter().map(unit_normalize).collect())
}

fn weighted_distance(extractor: &FeatureExtractor, a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let weights = &extractor.spec().layer_weights;
    a.iter().zip(b).zip(weights).map(|((x, y), w)| w * layer_distance(x, y)).sum()
}

/// Per-layer weighted mean squared difference of unit-normalized feature
/// maps.
pub fn perceptual_distance<T: Scalar>(extractor: &FeatureExtractor, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.ensure_same_shape(b, "perceptual distance")?;
    Ok(weighted_distance(extractor, &normalized_maps(extractor, a)?, &normalized_maps(extractor, b)?))
}

/// Normalizes a pair sum over `n` items.
pub fn diversity_coefficient(n: usize, mode: CoefficientMode) -> Result<f64> {
    if n < 2 {
        return Err(Error::TooFew(format!("diversity needs at least 2 images, got {n}")));
    }
    let n = n as f64;
    match mode {
        CoefficientMode::PairMean => Ok(2.0 / (n * (n - 1.0))),
        CoefficientMode::PaperLiteral if n == 2.0 => Err(Error::DivisionByZero("coefficient 2/((n-1)(n-2)) at n = 2".into())),
        CoefficientMode::PaperLiteral => Ok(2.0 / ((n - 1.0) * (n - 2.0))),
    }
}

/// Builds the report from precomputed pair distances.
pub fn diversity_from_pairs(n: usize, pairwise: Vec<(usize, usize, f64)>, mode: CoefficientMode) -> Result<DiversityReport> {
    let coef = diversity_coefficient(n, mode)?;
    if pairwise.len() != n * (n - 1) / 2 {
        return Err(Error::shape("pair distances", (n * (n - 1) / 2).to_string(), pairwise.len().to_string()));
    }
    // Summing in sorted order makes the result independent of input order.
    let mut ds: Vec<f64> = pairwise.iter().map(|p| p.2).collect();
    ds.sort_by(f64::total_cmp);
    let pair_sum: f64 = ds.iter().sum();
    Ok(DiversityReport {
        n,
        pairwise,
        pair_sum,
        mean_diversity: coef * pair_sum,
        coefficient_mode: mode,
    })
}

pub fn diversity<T: Scalar>(images: &[Tensor<T>], extractor: &FeatureExtractor, mode: CoefficientMode) -> Result<DiversityReport> {
    diversity_coefficient(images.len(), mode)?;
    for im in &images[1..] {
        if im.shape() != images[0].shape() {
            return Err(Error::shape("diversity set", shape_str(images[0].shape()), shape_str(im.shape())));
        }
    }
    let maps = images.iter().map(|im| normalized_maps(extractor, im)).collect::<Result<Vec<_>>>()?;
    let mut pairwise = Vec::new();
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            pairwise.push((i, j, weighted_distance(extractor, &maps[i], &maps[j])));
        }
    }
    diversity_from_pairs(images.len(), pairwise, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::extractor::ExtractorSpec;

    #[test]
    fn single_pair_mean() {
        let r = diversity_from_pairs(2, vec![(0, 1, 0.5)], CoefficientMode::PairMean).unwrap();
        assert_eq!(r.mean_diversity, 0.5);
        assert!(matches!(
            diversity_from_pairs(2, vec![(0, 1, 0.5)], CoefficientMode::PaperLiteral),
            Err(Error::DivisionByZero(_))
        ));
        assert!(matches!(diversity_coefficient(1, CoefficientMode::PairMean), Err(Error::TooFew(_))));
    }

    #[test]
    fn identical_images_have_zero_diversity() {
        let e = FeatureExtractor::seeded(&ExtractorSpec::default(), 1).unwrap();
        let x = Tensor::<f32>::from_fn(3, 16, 16, |c, y, x| ((c + 2 * y + 3 * x) as f32 * 0.2).sin());
        let set = vec![x.clone(), x.clone(), x];
        for mode in [CoefficientMode::PairMean, CoefficientMode::PaperLiteral] {
            assert_eq!(diversity(&set, &e, mode).unwrap().mean_diversity, 0.0);
        }
    }

    #[test]
    fn unit_vectors_bound_the_distance() {
        let e = FeatureExtractor::seeded(&ExtractorSpec::default(), 2).unwrap();
        let a = Tensor::<f64>::from_fn(3, 8, 8, |c, y, x| ((c * 9 + y * 4 + x) as f64 * 0.7).sin());
        let b = a.map(|v| -v);
        let d = perceptual_distance(&e, &a, &b).unwrap();
        assert!(d > 0.0 && d <= 4.0 * 2.0 + 1e-9, "{d}");
        assert_eq!(d, perceptual_distance(&e, &b, &a).unwrap());
    }
}
