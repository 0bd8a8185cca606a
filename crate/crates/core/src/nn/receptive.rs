//! Receptive field of the denoiser: analytic composition over the layer graph
//! and an empirical impulse probe.
//!
//! Both measure the same thing: the extent of the output region that a single
//! input pixel can change. The probed pixel sits on the coarsest sampling
//! grid (a multiple of `2^(stages - 1)`), which fixes the alignment of the
//! strided and upsampling layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::denoiser::{plan, DenoiserConfig, NoisePredictor, PlanOp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reference resolution used when no training size is given.
pub const REFERENCE_SIZE: (usize, usize) = (256, 256);

/// Changes at or below this magnitude count as untouched.
pub const PROBE_THRESHOLD: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub height_px: usize,
    pub width_px: usize,
    /// Image size `ratio` is measured against.
    pub reference: (usize, usize),
    /// RF edge over the geometric mean of the reference image edges.
    pub ratio: f64,
}

impl ReceptiveField {
    pub fn new(height_px: usize, width_px: usize, reference: (usize, usize)) -> Self {
        let edge = ((height_px * width_px) as f64).sqrt();
        let image = ((reference.0 * reference.1) as f64).sqrt();
        ReceptiveField {
            height_px,
            width_px,
            reference,
            ratio: edge / image,
        }
    }

    pub fn relative_to(&self, height: usize, width: usize) -> Self {
        ReceptiveField::new(self.height_px, self.width_px, (height, width))
    }
}

/// Closed interval of pixel coordinates on one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    lo: i64,
    hi: i64,
}

impl Span {
    fn grow(self, r: i64) -> Self {
        Span {
            lo: self.lo - r,
            hi: self.hi + r,
        }
    }

    fn hull(self, other: Span) -> Self {
        Span {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    fn width(self) -> usize {
        (self.hi - self.lo + 1) as usize
    }
}

/// Output positions `o` whose window `2o - r ..= 2o + r` meets the span.
fn strided(s: Span, r: i64) -> Span {
    Span {
        lo: (s.lo - r + 1).div_euclid(2),
        hi: (s.hi + r).div_euclid(2),
    }
}

/// Span of output pixels reachable from an input pixel at coordinate 0.
fn footprint(config: &DenoiserConfig) -> Span {
    let r = (config.kernel_size / 2) as i64;
    let mut cur = Span { lo: 0, hi: 0 };
    let mut skips = Vec::new();
    for op in plan(config) {
        cur = match op {
            PlanOp::In { .. } | PlanOp::Out { .. } => cur.grow(r),
            // Two convolutions on the main path; the shortcut is pointwise
            // and its span is contained in the main one.
            PlanOp::Res { .. } => cur.grow(2 * r).hull(cur),
            PlanOp::PushSkip => {
                skips.push(cur);
                cur
            }
            PlanOp::Down { .. } => strided(cur, r),
            PlanOp::Up { .. } => Span {
                lo: 2 * cur.lo,
                hi: 2 * cur.hi + 1,
            }
            .grow(r),
            PlanOp::Concat => cur.hull(skips.pop().expect("skip per concat")),
        };
    }
    cur
}

/// Analytic receptive field, with `ratio` against [`REFERENCE_SIZE`].
pub fn receptive_field(config: &DenoiserConfig) -> Result<ReceptiveField> {
    config.validate()?;
    let w = footprint(config).width();
    Ok(ReceptiveField::new(w, w, REFERENCE_SIZE))
}

/// Measures the receptive field by perturbing one input pixel of a
/// `probe_size x probe_size` input and boxing every output pixel that moved by
/// more than [`PROBE_THRESHOLD`].
///
/// The perturbation is applied at the grid-aligned pixel nearest the centre.
/// Random weights are required: a zero-initialized output projection
/// responds to nothing.
/// Smallest comfortable probe for a field of `rf_px` pixels: the field plus
/// a margin on each side, rounded up to `multiple`.
pub fn probe_size_for(rf_px: usize, multiple: usize) -> usize {
    (rf_px + 2 * multiple + 16).div_ceil(multiple) * multiple
}

pub fn impulse_probe<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    channels: usize,
    probe_size: usize,
) -> Result<ReceptiveField> {
    let m = denoiser.size_multiple();
    if probe_size == 0 || !probe_size.is_multiple_of(m) {
        return Err(Error::Divisibility {
            what: "probe size".into(),
            size: probe_size,
            multiple: m,
        });
    }
    let center = (probe_size / 2) / m * m;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let base = Tensor::<T>::randn(channels, probe_size, probe_size, &mut rng);
    let mut bumped = base.clone();
    for c in 0..channels {
        *bumped.at_mut(c, center, center) += T::one();
    }
    let t = 500;
    let y0 = denoiser.predict_noise(&base, t)?;
    let y1 = denoiser.predict_noise(&bumped, t)?;
    let thr = T::of(PROBE_THRESHOLD);
    let (mut y_lo, mut y_hi, mut x_lo, mut x_hi) = (usize::MAX, 0, usize::MAX, 0);
    for c in 0..y0.channels() {
        for y in 0..probe_size {
            for x in 0..probe_size {
                if (y1.at(c, y, x) - y0.at(c, y, x)).abs() > thr {
                    y_lo = y_lo.min(y);
                    y_hi = y_hi.max(y);
                    x_lo = x_lo.min(x);
                    x_hi = x_hi.max(x);
                }
            }
        }
    }
    if y_lo == usize::MAX {
        return Err(Error::InvalidConfig("impulse produced no response; probe needs random output weights".into()));
    }
    if y_lo == 0 || x_lo == 0 || y_hi + 1 == probe_size || x_hi + 1 == probe_size {
        let extent = (y_hi - y_lo + 1).max(x_hi - x_lo + 1);
        return Err(Error::ProbeTooSmall {
            probe_size,
            required: (2 * extent).div_ceil(m) * m,
        });
    }
    Ok(ReceptiveField::new(y_hi - y_lo + 1, x_hi - x_lo + 1, REFERENCE_SIZE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_window() {
        // Input 0 is read by outputs 0 (window -1..1); input 1 by 0 and 1.
        assert_eq!(strided(Span { lo: 0, hi: 0 }, 1), Span { lo: 0, hi: 0 });
        assert_eq!(strided(Span { lo: 1, hi: 1 }, 1), Span { lo: 0, hi: 1 });
        assert_eq!(strided(Span { lo: -1, hi: -1 }, 1), Span { lo: -1, hi: 0 });
    }

    #[test]
    fn two_stacked_convolutions() {
        // Input and output convolutions only.
        let cfg = DenoiserConfig {
            stages: 1,
            channels: vec![4],
            enc_resblocks: 0,
            dec_resblocks: 0,
            norm_groups: 1,
            time_embed_dim: 4,
            ..Default::default()
        };
        let rf = receptive_field(&cfg).unwrap();
        assert_eq!((rf.height_px, rf.width_px), (5, 5));
    }

    #[test]
    fn ratio_uses_geometric_mean() {
        let rf = ReceptiveField::new(16, 16, (64, 16));
        assert!((rf.ratio - 0.5).abs() < 1e-12);
    }
}
