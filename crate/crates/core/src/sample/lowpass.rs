//! The linear low-pass filter used by reference guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Block-average filter: each `n x n` block is replaced by its mean. This is
/// an area downsample followed by nearest upsampling, so it is linear and a
/// projection (`lowpass(lowpass(x)) == lowpass(x)`).
pub fn lowpass<T: Scalar>(image: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.shape();
    for (what, size) in [("height", h), ("width", w)] {
        if n == 0 || size % n != 0 {
            return Err(Error::Divisibility {
                what: format!("low-pass {what}"),
                size,
                multiple: n,
            });
        }
    }
    if n == 1 {
        return Ok(image.clone());
    }
    let (bh, bw) = (h / n, w / n);
    let scale = (n * n) as f64;
    let mut out = Tensor::zeros(c, h, w);
    let mut sums = vec![0.0f64; bw];
    let mut refs = vec![T::zero(); bw];
    for ci in 0..c {
        let src = image.channel(ci);
        let dst = out.channel_mut(ci);
        for by in 0..bh {
            // Offsets from each block's first pixel are summed in f64, so
            // constant blocks come back bit for bit.
            let top = by * n * w;
            for (bx, r) in refs.iter_mut().enumerate() {
                *r = src[top + bx * n];
            }
            sums.iter_mut().for_each(|s| *s = 0.0);
            for y in by * n..(by + 1) * n {
                for (x, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                    sums[x / n] += v.as_f64() - refs[x / n].as_f64();
                }
            }
            for y in by * n..(by + 1) * n {
                for (x, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                    *d = refs[x / n] + T::of(sums[x / n] / scale);
                }
            }
        }
    }
    Ok(out)
}

/// The filter `phi` of reference guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowPass {
    /// [`lowpass`] with the given block size.
    Block(usize),
    /// Maps everything to zero; reference guidance then reduces to plain
    /// sampling.
    Zero,
}

impl LowPass {
    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        match *self {
            LowPass::Block(n) => lowpass(image, n),
            LowPass::Zero => Ok(Tensor::zeros(image.channels(), image.height(), image.width())),
        }
    }

    /// `phi(target) + x - phi(x)`
    pub fn replace_low_band<T: Scalar>(&self, x: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            LowPass::Zero => Ok(x.clone()),
            LowPass::Block(_) => {
                let lo_t = self.apply(target)?;
                let lo_x = self.apply(x)?;
                let mut out = x.zip_map(&lo_x, |a, b| a - b);
                out.add_assign(&lo_t);
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_unchanged() {
        let x = Tensor::<f64>::full(3, 8, 8, 0.37);
        assert_eq!(lowpass(&x, 4).unwrap(), x);
    }

    #[test]
    fn block_size_one_is_identity() {
        let x = Tensor::<f64>::from_fn(2, 3, 5, |c, y, x| (c * 15 + y * 5 + x) as f64);
        assert_eq!(lowpass(&x, 1).unwrap(), x);
    }

    #[test]
    fn checkerboard_goes_to_block_mean() {
        let x = Tensor::<f64>::from_fn(1, 4, 6, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        assert!(lowpass(&x, 2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_averages() {
        let x = Tensor::<f64>::from_vec(1, 2, 4, vec![1.0, 2.0, 5.0, 5.0, 3.0, 6.0, 1.0, 1.0]).unwrap();
        let y = lowpass(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
        let x = Tensor::<f64>::from_vec(1, 2, 4, vec![0.0, 4.0, 8.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(lowpass(&x, 2).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn is_a_projection() {
        let x = Tensor::<f64>::from_fn(2, 8, 12, |c, y, x| ((c * 96 + y * 12 + x) as f64 * 0.71).sin());
        let once = lowpass(&x, 4).unwrap();
        assert_eq!(lowpass(&once, 4).unwrap(), once);
    }

    #[test]
    fn rejects_indivisible_size() {
        let x = Tensor::<f32>::zeros(1, 6, 6);
        assert!(matches!(lowpass(&x, 4), Err(Error::Divisibility { multiple: 4, .. })));
    }
}
