//! Ancestral sampling and its guided variants.
//!
//! Every sampler draws `x_T` and the per-step noise from one ChaCha stream
//! seeded with `seed`. Noise used to diffuse an outpainting source or an
//! editing reference comes from a second stream of the same seed, so a
//! guided run whose condition has no effect reproduces [`sample_uncond`]
//! bit for bit.

mod guidance;
mod lowpass;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::NoisePredictor;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{shape_str, Tensor};

pub use guidance::{GuidanceSpec, MeanColor, PatchTemplate, Quadratic, ScoreFunction};
pub use lowpass::{lowpass, LowPass};

/// Region-preserving generation: `mask` is 1 where content is generated and
/// 0 where the source is kept. The mask has one channel or as many as the
/// source.
#[derive(Debug, Clone)]
pub struct OutpaintTask<T> {
    pub source: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> OutpaintTask<T> {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.source.shape();
        let (mc, mh, mw) = self.mask.shape();
        if (mh, mw) != (h, w) || (mc != 1 && mc != c) {
            return Err(Error::shape("outpaint mask", format!("1 or {c} channels of {h}x{w}"), shape_str(self.mask.shape())));
        }
        if self.mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::InvalidConfig("outpaint mask must contain only 0 and 1".into()));
        }
        Ok(())
    }

    fn generate_at(&self, c: usize, i: usize) -> bool {
        let plane = self.source.plane();
        let mc = if self.mask.channels() == 1 { 0 } else { c };
        self.mask.data()[mc * plane + i] == T::one()
    }
}

/// Low-frequency editing towards `reference`.
#[derive(Debug, Clone)]
pub struct ReferenceTask<T> {
    pub reference: Tensor<T>,
    pub filter: LowPass,
}

impl<T: Scalar> ReferenceTask<T> {
    pub fn new(reference: Tensor<T>, downsample_factor: usize) -> Self {
        ReferenceTask {
            reference,
            filter: LowPass::Block(downsample_factor),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.apply(&self.reference).map(|_| ())
    }
}

/// What a run conditions on.
pub enum Condition<'a, T: Scalar> {
    None,
    Score(GuidanceSpec<'a, T>),
    Outpaint(&'a OutpaintTask<T>),
    Reference(&'a ReferenceTask<T>),
}

/// State after one reverse step, handed to observers.
pub struct StepView<'a, T> {
    /// The step just taken, `x_t -> x_{t-1}`.
    pub t: usize,
    pub x_prev: &'a Tensor<T>,
    /// The diffused source or reference at `t - 1` when the condition uses
    /// one.
    pub constraint: Option<&'a Tensor<T>>,
}

pub struct Sampler<'a, T: Scalar, D: NoisePredictor<T> + ?Sized> {
    pub denoiser: &'a D,
    pub schedule: &'a NoiseSchedule,
    _scalar: std::marker::PhantomData<T>,
}

/// Stream used for noising a source or reference.
const CONDITION_STREAM: u64 = 1;

impl<'a, T: Scalar, D: NoisePredictor<T> + ?Sized> Sampler<'a, T, D> {
    pub fn new(denoiser: &'a D, schedule: &'a NoiseSchedule) -> Self {
        Sampler {
            denoiser,
            schedule,
            _scalar: std::marker::PhantomData,
        }
    }

    fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.denoiser.size_multiple();
        for (what, size) in [("sample height", height), ("sample width", width)] {
            if size == 0 || size % m != 0 {
                return Err(Error::Divisibility {
                    what: what.into(),
                    size,
                    multiple: m,
                });
            }
        }
        Ok(())
    }

    /// Runs the chain from `t = T` to `0` and returns `x_0` without clamping.
    pub fn generate(
        &self,
        height: usize,
        width: usize,
        seed: u64,
        condition: &Condition<'_, T>,
        mut observer: Option<&mut dyn FnMut(&StepView<'_, T>)>,
    ) -> Result<Tensor<T>> {
        self.check_size(height, width)?;
        let c = self.denoiser.image_channels();
        let target = match condition {
            Condition::None => None,
            Condition::Score(g) => {
                g.validate()?;
                None
            }
            Condition::Outpaint(task) => {
                task.validate()?;
                Some(&task.source)
            }
            Condition::Reference(task) => {
                task.validate()?;
                Some(&task.reference)
            }
        };
        if let Some(t) = target {
            t.ensure_shape((c, height, width), "sampling condition")?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cond_rng = ChaCha8Rng::seed_from_u64(seed);
        cond_rng.set_stream(CONDITION_STREAM);

        let steps = self.schedule.steps();
        let mut x = Tensor::randn(c, height, width, &mut rng);
        for t in (1..=steps).rev() {
            let eps_hat = self.denoiser.predict_noise(&x, t)?;
            let mut mean = self.schedule.posterior_mean(&x, &eps_hat, t)?;
            if let Condition::Score(g) = condition {
                if g.scale != 0.0 {
                    let (_, grad) = g.score.value_and_grad(&x)?;
                    grad.ensure_same_shape(&x, "score gradient")?;
                    if !grad.all_finite() {
                        return Err(Error::NonFinite {
                            what: format!("{} score gradient", g.score.name()),
                            step: t,
                        });
                    }
                    let s = T::of(g.scale);
                    mean = mean.zip_map(&grad, |m, d| m + s * d);
                }
            }
            let proposal = if t > 1 {
                let z = Tensor::randn(c, height, width, &mut rng);
                self.schedule.add_step_noise(&mean, t, &z)?
            } else {
                mean
            };
            let noisy_target = match target {
                Some(src) if t > 1 => {
                    let e = Tensor::randn(c, height, width, &mut cond_rng);
                    Some(self.schedule.forward_diffuse(src, t - 1, &e)?.x_tilde)
                }
                Some(src) => Some(src.clone()),
                None => None,
            };
            x = match (condition, &noisy_target) {
                (Condition::Outpaint(task), Some(kept)) => {
                    let plane = kept.plane();
                    let mut out = proposal;
                    for (j, v) in out.data_mut().iter_mut().enumerate() {
                        if !task.generate_at(j / plane, j % plane) {
                            *v = kept.data()[j];
                        }
                    }
                    out
                }
                (Condition::Reference(task), Some(y)) => task.filter.replace_low_band(&proposal, y)?,
                _ => proposal,
            };
            if let Some(obs) = observer.as_deref_mut() {
                obs(&StepView {
                    t,
                    x_prev: &x,
                    constraint: noisy_target.as_ref(),
                });
            }
        }
        Ok(x)
    }

    fn finish(x: Tensor<T>) -> Tensor<T> {
        x.clamp(-T::one(), T::one())
    }
}

/// Unconditional sample of the given size, clamped to `[-1, 1]`.
pub fn sample_uncond<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let s = Sampler::new(denoiser, schedule);
    s.generate(height, width, seed, &Condition::None, None).map(Sampler::<T, D>::finish)
}

/// Sampling with the posterior mean shifted by `s * grad log C(x_t)`.
pub fn sample_score_guided<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    height: usize,
    width: usize,
    seed: u64,
    guidance: GuidanceSpec<'_, T>,
) -> Result<Tensor<T>> {
    let s = Sampler::new(denoiser, schedule);
    s.generate(height, width, seed, &Condition::Score(guidance), None).map(Sampler::<T, D>::finish)
}

/// Generates the masked region while the rest follows the diffused source
/// and ends as the source itself.
pub fn sample_outpaint<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    task: &OutpaintTask<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let (_, h, w) = task.source.shape();
    let s = Sampler::new(denoiser, schedule);
    s.generate(h, w, seed, &Condition::Outpaint(task), None).map(Sampler::<T, D>::finish)
}

/// Keeps the low band of every iterate equal to that of the diffused
/// reference.
pub fn sample_reference_guided<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    task: &ReferenceTask<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let (_, h, w) = task.reference.shape();
    let s = Sampler::new(denoiser, schedule);
    s.generate(h, w, seed, &Condition::Reference(task), None).map(Sampler::<T, D>::finish)
}
