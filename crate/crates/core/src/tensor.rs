//! Dense channel-major image tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A `channels x height x width` array stored channel-major (CHW).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// `(channels, height, width)`
pub type Shape = (usize, usize, usize);

pub(crate) fn shape_str(s: Shape) -> String {
    format!("{}x{}x{}", s.0, s.1, s.2)
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::full(channels, height, width, T::zero())
    }

    pub fn full(channels: usize, height: usize, width: usize, value: T) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "tensor data",
                format!("{} elements", channels * height * width),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    /// Standard-normal entries drawn in storage order.
    pub fn randn<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..channels * height * width)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn ensure_shape(&self, expected: Shape, context: &str) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::shape(context, shape_str(expected), shape_str(self.shape())));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        self.ensure_shape(other.shape(), context)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; panics on shape mismatch, callers validate first.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Circular shift: output `(y, x)` takes input `(y - dy, x - dx)` modulo size.
    pub fn roll(&self, dy: usize, dx: usize) -> Self {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(self.channels, h, w, |c, y, x| {
            self.at(c, (y + h - dy % h) % h, (x + w - dx % w) % w)
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        Tensor::from_fn(self.channels, height, width, |c, y, x| self.at(c, top + y, left + x))
    }

    /// Same values in another element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Stacks along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width), "concat spatial mismatch");
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits off the first `c` channels.
    pub fn split_channels(&self, c: usize) -> (Self, Self) {
        let p = self.plane();
        let head = Tensor {
            channels: c,
            height: self.height,
            width: self.width,
            data: self.data[..c * p].to_vec(),
        };
        let tail = Tensor {
            channels: self.channels - c,
            height: self.height,
            width: self.width,
            data: self.data[c * p..].to_vec(),
        };
        (head, tail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_moves_content() {
        let t = Tensor::<f64>::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let r = t.roll(1, 2);
        assert_eq!(r.at(0, 1, 2), t.at(0, 0, 0));
        assert_eq!(r.at(0, 0, 0), t.at(0, 3, 2));
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::<f32>::full(2, 3, 3, 1.0);
        let b = Tensor::<f32>::full(1, 3, 3, 2.0);
        let (x, y) = a.concat_channels(&b).split_channels(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
    }
}
