//! Differentiable scores for guided sampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

/// A differentiable log-score `log C(x)` of an image.
pub trait ScoreFunction<T: Scalar> {
    /// Value and gradient with respect to `x`.
    fn value_and_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)>;

    fn name(&self) -> String;
}

/// Score plug-in and its scale `s >= 0`.
pub struct GuidanceSpec<'a, T: Scalar> {
    pub score: &'a dyn ScoreFunction<T>,
    pub scale: f64,
}

impl<T: Scalar> GuidanceSpec<'_, T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidRange(format!("guidance scale must be finite and >= 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// `-1/2 ||x - c||^2`; the gradient is `c - x`.
#[derive(Debug, Clone)]
pub struct Quadratic<T> {
    pub center: Tensor<T>,
}

impl<T: Scalar> ScoreFunction<T> for Quadratic<T> {
    fn value_and_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        x.ensure_same_shape(&self.center, "quadratic score")?;
        let g = self.center.zip_map(x, |c, v| c - v);
        let v = -0.5 * g.data().iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>();
        Ok((v, g))
    }

    fn name(&self) -> String {
        "quadratic".into()
    }
}

/// Pulls the per-channel mean colour towards `target`:
/// `-P/2 * sum_c (mean_c(x) - target_c)^2` with `P` pixels, so each pixel's
/// gradient is `target_c - mean_c(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanColor {
    pub target: Vec<f64>,
}

impl<T: Scalar> ScoreFunction<T> for MeanColor {
    fn value_and_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        if x.channels() != self.target.len() {
            return Err(Error::shape("mean colour target", self.target.len().to_string(), shape_str(x.shape())));
        }
        let p = x.plane() as f64;
        let mut value = 0.0;
        let mut g = Tensor::zeros(x.channels(), x.height(), x.width());
        for (c, &tc) in self.target.iter().enumerate() {
            let mean = x.channel(c).iter().map(|v| v.as_f64()).sum::<f64>() / p;
            value -= 0.5 * p * (mean - tc) * (mean - tc);
            let d = T::of(tc - mean);
            g.channel_mut(c).iter_mut().for_each(|v| *v = d);
        }
        Ok((value, g))
    }

    fn name(&self) -> String {
        "mean-color".into()
    }
}

/// Mean correlation of every fully contained `k x k` window with a
/// template. Linear in the image, so the gradient does not depend on `x`.
#[derive(Debug, Clone)]
pub struct PatchTemplate<T> {
    pub template: Tensor<T>,
}

impl<T: Scalar> PatchTemplate<T> {
    /// The template with its mean removed, so flat images score zero.
    pub fn centered(template: Tensor<T>) -> Self {
        let m = template.mean();
        PatchTemplate {
            template: template.map(|v| v - m),
        }
    }
}

impl<T: Scalar> ScoreFunction<T> for PatchTemplate<T> {
    fn value_and_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let (c, kh, kw) = self.template.shape();
        let (xc, h, w) = x.shape();
        if c != xc || kh > h || kw > w {
            return Err(Error::shape("patch template", shape_str(self.template.shape()), shape_str(x.shape())));
        }
        let (ny, nx) = (h - kh + 1, w - kw + 1);
        let inv = 1.0 / (ny * nx) as f64;
        let mut value = 0.0;
        let mut g = Tensor::zeros(c, h, w);
        for ci in 0..c {
            for dy in 0..kh {
                for dx in 0..kw {
                    let wt = self.template.at(ci, dy, dx).as_f64() * inv;
                    for y in 0..ny {
                        for xx in 0..nx {
                            value += wt * x.at(ci, y + dy, xx + dx).as_f64();
                            *g.at_mut(ci, y + dy, xx + dx) += T::of(wt);
                        }
                    }
                }
            }
        }
        Ok((value, g))
    }

    fn name(&self) -> String {
        "patch-template".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn ScoreFunction<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let h = 1e-6;
        let mut xp = x.clone();
        let mut g = Tensor::zeros(x.channels(), x.height(), x.width());
        for i in 0..x.len() {
            let o = xp.data()[i];
            xp.data_mut()[i] = o + h;
            let up = f.value_and_grad(&xp).unwrap().0;
            xp.data_mut()[i] = o - h;
            let down = f.value_and_grad(&xp).unwrap().0;
            xp.data_mut()[i] = o;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradients_match_values() {
        let x = Tensor::<f64>::from_fn(3, 4, 5, |c, y, x| ((c * 7 + y * 3 + x) as f64 * 0.37).sin());
        let center = Tensor::<f64>::full(3, 4, 5, 0.2);
        let template = Tensor::<f64>::from_fn(3, 2, 3, |c, y, x| (c + y) as f64 - x as f64 * 0.5);
        let scores: Vec<Box<dyn ScoreFunction<f64>>> = vec![
            Box::new(Quadratic { center }),
            Box::new(MeanColor {
                target: vec![0.5, -0.1, 0.0],
            }),
            Box::new(PatchTemplate::centered(template)),
        ];
        for s in &scores {
            let (_, g) = s.value_and_grad(&x).unwrap();
            assert!(g.max_abs_diff(&numeric_grad(s.as_ref(), &x)) < 1e-7, "{}", s.name());
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::<f32>::full(1, 2, 2, 0.25);
        let c = Tensor::<f32>::full(1, 2, 2, 1.0);
        let (v, g) = Quadratic { center: c }.value_and_grad(&x).unwrap();
        assert!(g.data().iter().all(|&d| d == 0.75));
        assert!((v + 0.5 * 4.0 * 0.5625).abs() < 1e-9);
    }

    #[test]
    fn negative_scale_is_rejected() {
        let s = MeanColor { target: vec![0.0] };
        let g = GuidanceSpec::<f32> { score: &s, scale: -1.0 };
        assert!(g.validate().is_err());
    }
}
