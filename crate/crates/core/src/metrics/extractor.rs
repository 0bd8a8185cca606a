//! A small VGG-style convolutional feature stack.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::archive::{file_sha256, Archive};
use crate::nn::layers::Conv2d;
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EXTRACTOR_KIND: &str = "feature-extractor";

/// Stages of `convs_per_stage` 3x3 convolutions with ReLU, separated by 2x2
/// max pooling. The activation at the end of stage `export_stage`, before its
/// pool, is the patch feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSpec {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    /// 1-based.
    pub export_stage: usize,
    /// Weight of each stage output in the perceptual distance.
    pub layer_weights: Vec<f64>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            input_channels: 3,
            widths: vec![32, 64],
            convs_per_stage: 2,
            export_stage: 2,
            layer_weights: vec![1.0, 1.0],
        }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) || self.convs_per_stage == 0 {
            return bad("extractor needs positive channels, widths and convs_per_stage".into());
        }
        if self.export_stage == 0 || self.export_stage > self.widths.len() {
            return bad(format!("export_stage {} outside 1..={}", self.export_stage, self.widths.len()));
        }
        if self.layer_weights.len() != self.widths.len() || self.layer_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("layer_weights needs one non-negative entry per stage".into());
        }
        Ok(())
    }

    /// Smallest edge that leaves every stage at least one pixel.
    pub fn min_size(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    spec: ExtractorSpec,
    params: ParamSet<f64>,
    convs: Vec<Vec<Conv2d>>,
    provenance: String,
}

fn max_pool2(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, h / 2, w / 2, |ci, y, xx| {
        let (y2, x2) = (2 * y, 2 * xx);
        x.at(ci, y2, x2).max(x.at(ci, y2, x2 + 1)).max(x.at(ci, y2 + 1, x2)).max(x.at(ci, y2 + 1, x2 + 1))
    })
}

impl FeatureExtractor {
    fn layout(spec: &ExtractorSpec, params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) -> Vec<Vec<Conv2d>> {
        let mut c_in = spec.input_channels;
        let mut convs = Vec::new();
        for (s, &width) in spec.widths.iter().enumerate() {
            let mut stage = Vec::new();
            for i in 0..spec.convs_per_stage {
                let conv = Conv2d::new(params, &format!("stage{s}.conv{i}"), c_in, width, 3, 1, true, rng);
                // He-uniform keeps activations from shrinking through the ReLUs.
                let bound = (6.0 / (c_in * 9) as f64).sqrt();
                for v in params.get_mut(conv.weight) {
                    *v = rng.random_range(-bound..bound);
                }
                stage.push(conv);
                c_in = width;
            }
            convs.push(stage);
        }
        convs
    }

    /// Random weights drawn from `seed`, zero biases.
    pub fn seeded(spec: &ExtractorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = Self::layout(spec, &mut params, &mut rng);
        Ok(FeatureExtractor {
            spec: spec.clone(),
            params,
            convs,
            provenance: format!("seeded:{seed}"),
        })
    }

    /// Replaces the weights, keeping the layout; dims must match.
    pub fn with_params(&self, params: ParamSet<f64>, provenance: impl Into<String>) -> Result<Self> {
        for (a, b) in self.params.iter().zip(params.iter()) {
            if a.name != b.name || a.dims != b.dims {
                return Err(Error::ArrayShape {
                    name: b.name.clone(),
                    expected: a.dims.clone(),
                    found: b.dims.clone(),
                });
            }
        }
        if self.params.len() != params.len() {
            return Err(Error::Format(format!("{} extractor arrays, expected {}", params.len(), self.params.len())));
        }
        Ok(FeatureExtractor {
            params,
            provenance: provenance.into(),
            ..self.clone()
        })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }

    /// Where the weights came from, for reports.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    fn check<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<f64>> {
        let (c, h, w) = image.shape();
        let min = self.spec.min_size();
        if h < min || w < min {
            return Err(Error::shape("feature extractor input", format!("edges of at least {min}"), format!("{h}x{w}")));
        }
        let x = image.cast::<f64>();
        if c == self.spec.input_channels {
            Ok(x)
        } else if c == 1 {
            Ok(Tensor::from_fn(self.spec.input_channels, h, w, |_, y, xx| x.at(0, y, xx)))
        } else {
            Err(Error::shape("feature extractor channels", self.spec.input_channels.to_string(), c.to_string()))
        }
    }

    /// Pre-pool activation of every stage up to `last` (1-based).
    fn stage_maps(&self, x: Tensor<f64>, last: usize) -> Vec<Tensor<f64>> {
        let mut maps = Vec::with_capacity(last);
        let mut x = x;
        for (s, stage) in self.convs.iter().take(last).enumerate() {
            if s > 0 {
                x = max_pool2(&x);
            }
            for conv in stage {
                x = conv.infer(&self.params, &x).map(|v| v.max(0.0));
            }
            maps.push(x.clone());
        }
        maps
    }

    /// Output of every stage, used by the perceptual distance.
    pub fn layer_maps<T: Scalar>(&self, image: &Tensor<T>) -> Result<Vec<Tensor<f64>>> {
        let x = self.check(image)?;
        Ok(self.stage_maps(x, self.spec.widths.len()))
    }

    /// The exported map as a `positions x channels` matrix, row-major over
    /// the map's grid.
    pub fn extract_patch_features<T: Scalar>(&self, image: &Tensor<T>) -> Result<DMatrix<f64>> {
        let x = self.check(image)?;
        let map = self.stage_maps(x, self.spec.export_stage).pop().expect("at least one stage");
        let (c, h, w) = map.shape();
        Ok(DMatrix::from_fn(h * w, c, |r, ci| map.channel(ci)[r]))
    }

    pub fn to_archive(&self) -> Archive {
        let mut arrays = Vec::new();
        Archive::push_params(&mut arrays, "", &self.params);
        let info = serde_json::json!({ "spec": self.spec, "provenance": self.provenance });
        Archive::new(EXTRACTOR_KIND, info, arrays)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads weights laid out as `spec` describes.
    pub fn load(path: impl AsRef<Path>, spec: &ExtractorSpec) -> Result<Self> {
        let path = path.as_ref();
        let archive = Archive::load(path)?;
        let template = FeatureExtractor::seeded(spec, 0)?;
        let params = archive.read_params("", &template.params)?;
        let hash = file_sha256(path)?;
        template.with_params(params, format!("archive:{} sha256:{hash}", path.display()))
    }
}

/// Loads an extractor with the default layout from a weight archive.
pub fn load_extractor_weights(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
    FeatureExtractor::load(path, &ExtractorSpec::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_first_conv_gives_zero_features() {
        let mut e = FeatureExtractor::seeded(&ExtractorSpec::default(), 3).unwrap();
        let w = e.convs[0][0].weight;
        e.params_mut().get_mut(w).iter_mut().for_each(|v| *v = 0.0);
        let f = e.extract_patch_features(&Tensor::<f32>::full(3, 16, 16, 0.4)).unwrap();
        assert_eq!(f.shape(), (64, 64));
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_follow_the_exported_grid() {
        let spec = ExtractorSpec {
            widths: vec![4, 5, 6],
            layer_weights: vec![1.0; 3],
            export_stage: 3,
            ..ExtractorSpec::default()
        };
        let e = FeatureExtractor::seeded(&spec, 0).unwrap();
        let x = Tensor::<f64>::from_fn(3, 12, 20, |c, y, x| ((c + y * 2 + x) as f64).sin());
        assert_eq!(e.extract_patch_features(&x).unwrap().shape(), (3 * 5, 6));
        assert!(e.extract_patch_features(&Tensor::<f64>::zeros(3, 3, 8)).is_err());
    }

    #[test]
    fn seeded_is_deterministic() {
        let a = FeatureExtractor::seeded(&ExtractorSpec::default(), 11).unwrap();
        let b = FeatureExtractor::seeded(&ExtractorSpec::default(), 11).unwrap();
        let c = FeatureExtractor::seeded(&ExtractorSpec::default(), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn save_load_and_named_errors() {
        let dir = tempfile::tempdir().unwrap();
        let e = FeatureExtractor::seeded(&ExtractorSpec::default(), 5).unwrap();
        let path = dir.path().join("w.bin");
        e.save(&path).unwrap();
        let back = load_extractor_weights(&path).unwrap();
        assert_eq!(back.params(), e.params());
        assert!(back.provenance().starts_with("archive:"));
        let x = Tensor::<f32>::from_fn(3, 16, 16, |c, y, x| ((c * 5 + y * 3 + x) as f32 * 0.1).cos());
        assert_eq!(back.extract_patch_features(&x).unwrap(), e.extract_patch_features(&x).unwrap());

        let mut a = e.to_archive();
        let gone = a.arrays.remove(1).name;
        let missing = dir.path().join("m.bin");
        Archive::new(EXTRACTOR_KIND, a.meta.info.clone(), a.arrays).save(&missing).unwrap();
        match load_extractor_weights(&missing) {
            Err(Error::MissingArray(n)) => assert_eq!(n, gone),
            other => panic!("unexpected {other:?}"),
        }

        let mut a = e.to_archive();
        let first = &mut a.arrays[0];
        first.dims = vec![first.dims[1], first.dims[0], 3, 3];
        let name = first.name.clone();
        let transposed = dir.path().join("t.bin");
        Archive::new(EXTRACTOR_KIND, a.meta.info.clone(), a.arrays).save(&transposed).unwrap();
        match load_extractor_weights(&transposed) {
            Err(Error::ArrayShape { name: n, expected, found }) => {
                assert_eq!(n, name);
                assert_eq!(expected, vec![32, 3, 3, 3]);
                assert_eq!(found, vec![3, 32, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
