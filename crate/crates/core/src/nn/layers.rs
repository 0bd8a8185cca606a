//! Layer primitives with hand-written backward passes.
//!
//! Every layer works on a single `C x H x W` tensor. Forward passes return the
//! values needed by the matching backward pass; backward passes accumulate
//! parameter gradients into a [`ParamSet`] laid out like the parameters.

use rand::Rng;

use crate::nn::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
pub(crate) fn uniform_weights<T: Scalar, R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

/// Upper bound on unfolded elements held at once during inference.
const INFER_COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let n = c_out * c_in * kernel * kernel;
        let w = if zero_init {
            vec![T::zero(); n]
        } else {
            uniform_weights(n, c_in * kernel * kernel, rng)
        };
        let weight = params.push(format!("{name}.weight"), vec![c_out, c_in, kernel, kernel], w);
        let bias = params.push(format!("{name}.bias"), vec![c_out], vec![T::zero(); c_out]);
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.kernel) / self.stride + 1, (w + 2 * p - self.kernel) / self.stride + 1)
    }

    fn im2col<T: Scalar>(&self, x: &Tensor<T>) -> Vec<T> {
        if self.kernel == 1 && self.stride == 1 {
            return x.data().to_vec();
        }
        let (ho, _) = self.out_size(x.height(), x.width());
        self.im2col_rows(x, 0, ho)
    }

    fn col2im<T: Scalar>(&self, cols: &[T], shape: (usize, usize, usize)) -> Tensor<T> {
        let (c, h, w) = shape;
        if self.kernel == 1 && self.stride == 1 {
            return Tensor::from_vec(c, h, w, cols.to_vec()).expect("col2im shape");
        }
        let (ho, wo) = self.out_size(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.pad() as isize);
        let p = ho * wo;
        let mut out = Tensor::zeros(c, h, w);
        for ci in 0..c {
            let dst = out.channel_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..][..w];
                        for (ox, &g) in row[oy * wo..][..wo].iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        debug_assert_eq!(x.channels(), self.c_in);
        let (ho, wo) = self.out_size(x.height(), x.width());
        let cols = self.im2col(x);
        let y = self.apply(params, &cols, ho, wo);
        (
            y,
            ConvCache {
                cols,
                in_shape: x.shape(),
            },
        )
    }

    /// Forward pass without keeping anything for backward.
    pub fn infer<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let (ho, wo) = self.out_size(x.height(), x.width());
        if self.kernel == 1 && self.stride == 1 {
            return self.apply(params, x.data(), ho, wo);
        }
        let kk = self.c_in * self.kernel * self.kernel;
        let rows = (INFER_COLS_BUDGET / (kk * wo).max(1)).max(1);
        if rows >= ho {
            let cols = self.im2col(x);
            return self.apply(params, &cols, ho, wo);
        }
        // Large inputs: unfold a band of output rows at a time.
        let mut out = Tensor::zeros(self.c_out, ho, wo);
        let mut y0 = 0;
        while y0 < ho {
            let y1 = (y0 + rows).min(ho);
            let cols = self.im2col_rows(x, y0, y1);
            let band = self.apply(params, &cols, y1 - y0, wo);
            for co in 0..self.c_out {
                out.channel_mut(co)[y0 * wo..y1 * wo].copy_from_slice(band.channel(co));
            }
            y0 = y1;
        }
        out
    }

    fn im2col_rows<T: Scalar>(&self, x: &Tensor<T>, y0: usize, y1: usize) -> Vec<T> {
        let (c, h, w) = x.shape();
        let (_, wo) = self.out_size(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.pad() as isize);
        let p = (y1 - y0) * wo;
        let mut cols = vec![T::zero(); c * k * k * p];
        for ci in 0..c {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in y0..y1 {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..][..w];
                        let dst = &mut row[(oy - y0) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn apply<T: Scalar>(&self, params: &ParamSet<T>, cols: &[T], ho: usize, wo: usize) -> Tensor<T> {
        let p = ho * wo;
        let kk = self.c_in * self.kernel * self.kernel;
        let bias = params.get(self.bias);
        let mut out = Vec::with_capacity(self.c_out * p);
        for &b in bias {
            out.extend(std::iter::repeat_n(b, p));
        }
        T::gemm(self.c_out, kk, p, T::one(), params.get(self.weight), false, cols, false, T::one(), &mut out);
        Tensor::from_vec(self.c_out, ho, wo, out).expect("conv output shape")
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamSet<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let p = dy.plane();
        let kk = self.c_in * self.kernel * self.kernel;
        T::gemm(self.c_out, p, kk, T::one(), dy.data(), false, &cache.cols, true, T::one(), grads.get_mut(self.weight));
        let gb = grads.get_mut(self.bias);
        for (co, g) in gb.iter_mut().enumerate() {
            *g += dy.channel(co).iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * p];
        T::gemm(kk, self.c_out, p, T::one(), params.get(self.weight), true, dy.data(), false, T::zero(), &mut dcols);
        Some(self.col2im(&dcols, cache.in_shape))
    }
}

/// Group normalization whose statistics are taken over the channels of each
/// group at a single spatial position, so the layer never mixes pixels.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = params.push(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        let beta = params.push(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
        GroupNorm {
            gamma,
            beta,
            channels,
            groups,
        }
    }

    fn normalize<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let (c, _, _) = x.shape();
        let p = x.plane();
        let gs = c / self.groups;
        let inv_gs = T::of(1.0 / gs as f64);
        let eps = T::of(NORM_EPS);
        let mut xhat = x.clone();
        let mut inv_std = vec![T::zero(); self.groups * p];
        let mut mean = vec![T::zero(); p];
        let mut var = vec![T::zero(); p];
        for g in 0..self.groups {
            mean.iter_mut().for_each(|v| *v = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for ci in g * gs..(g + 1) * gs {
                for (m, &v) in mean.iter_mut().zip(x.channel(ci)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_gs);
            for ci in g * gs..(g + 1) * gs {
                for ((s, &v), &m) in var.iter_mut().zip(x.channel(ci)).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let inv = &mut inv_std[g * p..(g + 1) * p];
            for (i, s) in inv.iter_mut().zip(&var) {
                *i = T::one() / (*s * inv_gs + eps).sqrt();
            }
            for ci in g * gs..(g + 1) * gs {
                for ((v, &m), &i) in xhat.channel_mut(ci).iter_mut().zip(&mean).zip(inv.iter()) {
                    *v = (*v - m) * i;
                }
            }
        }
        (xhat, inv_std)
    }

    fn affine<T: Scalar>(&self, params: &ParamSet<T>, xhat: &Tensor<T>) -> Tensor<T> {
        let mut y = xhat.clone();
        let (gamma, beta) = (params.get(self.gamma), params.get(self.beta));
        for ci in 0..self.channels {
            let (g, b) = (gamma[ci], beta[ci]);
            y.channel_mut(ci).iter_mut().for_each(|v| *v = *v * g + b);
        }
        y
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let (xhat, inv_std) = self.normalize(x);
        let y = self.affine(params, &xhat);
        (y, NormCache { xhat, inv_std })
    }

    pub fn infer<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let (xhat, _) = self.normalize(x);
        self.affine(params, &xhat)
    }

    pub fn backward<T: Scalar>(&self, params: &ParamSet<T>, cache: &NormCache<T>, dy: &Tensor<T>, grads: &mut ParamSet<T>) -> Tensor<T> {
        let p = dy.plane();
        let gs = self.channels / self.groups;
        let gamma = params.get(self.gamma);
        {
            let gg = grads.get_mut(self.gamma);
            for (ci, g) in gg.iter_mut().enumerate() {
                *g += dy.channel(ci).iter().zip(cache.xhat.channel(ci)).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        {
            let gb = grads.get_mut(self.beta);
            for (ci, g) in gb.iter_mut().enumerate() {
                *g += dy.channel(ci).iter().copied().sum::<T>();
            }
        }
        let inv_gs = T::of(1.0 / gs as f64);
        let mut dx = Tensor::zeros(self.channels, dy.height(), dy.width());
        let mut s1 = vec![T::zero(); p];
        let mut s2 = vec![T::zero(); p];
        for g in 0..self.groups {
            s1.iter_mut().for_each(|v| *v = T::zero());
            s2.iter_mut().for_each(|v| *v = T::zero());
            for ci in g * gs..(g + 1) * gs {
                let gm = gamma[ci];
                for ((a, b), (&d, &xh)) in s1.iter_mut().zip(s2.iter_mut()).zip(dy.channel(ci).iter().zip(cache.xhat.channel(ci))) {
                    let dxh = d * gm;
                    *a += dxh;
                    *b += dxh * xh;
                }
            }
            let inv = &cache.inv_std[g * p..(g + 1) * p];
            for ci in g * gs..(g + 1) * gs {
                let gm = gamma[ci];
                let out = dx.channel_mut(ci);
                for i in 0..p {
                    let dxh = dy.channel(ci)[i] * gm;
                    let xh = cache.xhat.channel(ci)[i];
                    out[i] = inv[i] * (dxh - inv_gs * (s1[i] + xh * s2[i]));
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let weight = params.push(format!("{name}.weight"), vec![n_out, n_in], uniform_weights(n_out * n_in, n_in, rng));
        let bias = params.push(format!("{name}.bias"), vec![n_out], vec![T::zero(); n_out]);
        Linear {
            weight,
            bias,
            n_in,
            n_out,
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &[T]) -> Vec<T> {
        let w = params.get(self.weight);
        params
            .get(self.bias)
            .iter()
            .enumerate()
            .map(|(o, &b)| b + w[o * self.n_in..(o + 1) * self.n_in].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>())
            .collect()
    }

    pub fn backward<T: Scalar>(&self, params: &ParamSet<T>, x: &[T], dy: &[T], grads: &mut ParamSet<T>) -> Vec<T> {
        {
            let gw = grads.get_mut(self.weight);
            for (o, &d) in dy.iter().enumerate() {
                for (g, &v) in gw[o * self.n_in..(o + 1) * self.n_in].iter_mut().zip(x) {
                    *g += d * v;
                }
            }
        }
        for (g, &d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
        let w = params.get(self.weight);
        let mut dx = vec![T::zero(); self.n_in];
        for (o, &d) in dy.iter().enumerate() {
            for (g, &a) in dx.iter_mut().zip(&w[o * self.n_in..(o + 1) * self.n_in]) {
                *g += d * a;
            }
        }
        dx
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu)
}

/// `dy * silu'(x)`
pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |a, d| d * silu_grad(a))
}

pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, 2 * h, 2 * w, |ci, y, xx| x.at(ci, y / 2, xx / 2))
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = dy.shape();
    let mut dx = Tensor::zeros(c, h / 2, w / 2);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                *dx.at_mut(ci, y / 2, x / 2) += dy.at(ci, y, x);
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a timestep; odd dimensions get a trailing zero.
pub fn timestep_embedding<T: Scalar>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::of((t * freq).sin());
        out[half + i] = T::of((t * freq).cos());
    }
    out
}
