//! Discrete variance schedule, forward noising and the ancestral reverse step.
//!
//! Timesteps are 1-based throughout the public API: `t = 1` is the least
//! noisy step and `t = T` the terminal one. All schedule arithmetic is done in
//! `f64`; coefficients are narrowed to the tensor element type when applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters of a linear schedule, as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// A noised image together with the noise and timestep that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample<T> {
    pub x_tilde: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| {
                    if i == steps - 1 {
                        beta_end
                    } else {
                        beta_start + span * (i as f64) / ((steps - 1) as f64)
                    }
                })
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (1.0 - ab))
    }

    /// `x_tilde = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_diffuse<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<NoisySample<T>> {
        let ab = self.alpha_bar(t)?;
        eps.ensure_same_shape(x0, "forward_diffuse noise")?;
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        Ok(NoisySample {
            x_tilde: x0.zip_map(eps, |x, e| a * x + b * e),
            t,
            eps: eps.clone(),
        })
    }

    /// Mean of `p(x_{t-1} | x_t)` given a noise prediction:
    /// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`.
    pub fn posterior_mean<T: Scalar>(&self, x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let i = self.check(t)?;
        eps_hat.ensure_same_shape(x_t, "reverse_step prediction")?;
        let c1 = T::of(1.0 / self.alphas[i].sqrt());
        let c2 = T::of(self.betas[i] / (1.0 - self.alpha_bars[i]).sqrt());
        Ok(x_t.zip_map(eps_hat, |x, e| c1 * (x - c2 * e)))
    }

    /// Adds `sigma_t z` to a (possibly perturbed) posterior mean.
    pub fn add_step_noise<T: Scalar>(&self, mean: &Tensor<T>, t: usize, z: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.check(t)?;
        z.ensure_same_shape(mean, "reverse_step noise")?;
        if t == 1 {
            if z.data().iter().any(|v| *v != T::zero()) {
                return Err(Error::NonzeroFinalNoise);
            }
            return Ok(mean.clone());
        }
        let s = T::of(self.sigmas[i]);
        Ok(mean.zip_map(z, |m, n| m + s * n))
    }

    /// One ancestral step `x_t -> x_{t-1}`.
    pub fn reverse_step<T: Scalar>(&self, x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, z: &Tensor<T>) -> Result<Tensor<T>> {
        z.ensure_same_shape(x_t, "reverse_step noise")?;
        let mean = self.posterior_mean(x_t, eps_hat, t)?;
        self.add_step_noise(&mean, t, z)
    }
}
