//! Fitting the noise predictor to a single image.

mod optim;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Denoiser, DenoiserConfig, NoisePredictor, ParamSet};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::tensor::Tensor;

pub use optim::{clip_grad_norm, ema_update, optimizer_step, AdamHyper, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Version of the checkpoint layout written by this crate.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    Single,
    /// Forward and backward passes see weights rounded to binary16 and the
    /// gradients are rounded the same way; the master copy stays in the
    /// model scalar type.
    HalfComputeSingleMaster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Independent `(t, eps)` draws of the full image per step.
    pub batch: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// Global gradient norm limit; `None` or `0` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub precision: Precision,
    /// Steps between intermediate checkpoints; `0` keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 100_000,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            batch: 8,
            ema_decay: 0.9999,
            seed: 0,
            grad_clip_norm: Some(1.0),
            precision: Precision::Single,
            checkpoint_interval: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c >= 0.0) {
                return bad(format!("grad_clip_norm must be non-negative, got {c}"));
            }
        }
        Ok(())
    }

    fn clip(&self) -> Option<f64> {
        self.grad_clip_norm.filter(|&c| c > 0.0)
    }
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub denoiser_config: DenoiserConfig,
    pub schedule_params: ScheduleParams,
    pub raw_params: ParamSet<T>,
    pub ema_params: ParamSet<T>,
    pub step: usize,
    pub train_config: TrainConfig,
    pub format_version: u32,
}

impl<T: Scalar> Checkpoint<T> {
    /// Network with the averaged weights, used for sampling.
    pub fn ema_denoiser(&self) -> Result<Denoiser<T>> {
        Ok(Denoiser::with_params(&self.denoiser_config, self.ema_params.clone())?.with_timesteps(self.schedule_params.steps))
    }

    pub fn raw_denoiser(&self) -> Result<Denoiser<T>> {
        Ok(Denoiser::with_params(&self.denoiser_config, self.raw_params.clone())?.with_timesteps(self.schedule_params.steps))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule_params.build()
    }

    pub fn validate(&self) -> Result<()> {
        self.raw_params.ensure_compatible(&self.ema_params, "ema parameters")?;
        Denoiser::<T>::new(&self.denoiser_config, 0)?
            .params()
            .ensure_compatible(&self.raw_params, "checkpoint parameters")?;
        if self.step > self.train_config.total_steps {
            return Err(Error::InvalidConfig(format!(
                "checkpoint step {} exceeds total_steps {}",
                self.step, self.train_config.total_steps
            )));
        }
        Ok(())
    }
}

fn check_draws<T: Scalar>(x0: &Tensor<T>, ts: &[usize], eps: &[Tensor<T>]) -> Result<()> {
    if ts.len() != eps.len() {
        return Err(Error::shape("loss draws", format!("{} noise tensors", ts.len()), eps.len().to_string()));
    }
    if ts.is_empty() {
        return Err(Error::TooFew("loss needs at least one draw".into()));
    }
    for e in eps {
        e.ensure_same_shape(x0, "loss noise draw")?;
    }
    Ok(())
}

/// Mean over draws and elements of `(eps - eps_hat)^2`.
pub fn denoising_loss<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &[Tensor<T>],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_draws(x0, ts, eps)?;
    let mut total = 0.0;
    for (&t, e) in ts.iter().zip(eps) {
        let noisy = schedule.forward_diffuse(x0, t, e)?;
        let pred = denoiser.predict_noise(&noisy.x_tilde, t)?;
        total += squared_error(&pred, e);
    }
    Ok(total / (ts.len() * x0.len()) as f64)
}

fn squared_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = (p - q).as_f64();
            d * d
        })
        .sum()
}

/// [`denoising_loss`] together with its parameter gradient, which is added
/// to `grads`.
pub fn loss_and_grad<T: Scalar>(
    denoiser: &Denoiser<T>,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &[Tensor<T>],
    schedule: &NoiseSchedule,
    grads: &mut ParamSet<T>,
) -> Result<f64> {
    check_draws(x0, ts, eps)?;
    denoiser.params().ensure_compatible(grads, "gradient buffer")?;
    let n = (ts.len() * x0.len()) as f64;
    let scale = T::of(2.0 / n);
    let mut total = 0.0;
    for (&t, e) in ts.iter().zip(eps) {
        let noisy = schedule.forward_diffuse(x0, t, e)?;
        let (pred, trace) = denoiser.forward_trace(&noisy.x_tilde, t)?;
        total += squared_error(&pred, e);
        let dy = pred.zip_map(e, |p, q| scale * (p - q));
        denoiser.backward(&trace, &dy, grads);
    }
    Ok(total / n)
}

fn round_to_half<T: Scalar>(dst: &mut ParamSet<T>, src: &ParamSet<T>) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        for (a, &b) in d.data.iter_mut().zip(&s.data) {
            *a = T::of(f16::from_f64(b.as_f64()).to_f64());
        }
    }
}

/// Single-image training loop state.
pub struct Trainer<T: Scalar> {
    image: Tensor<T>,
    denoiser: Denoiser<T>,
    /// Weights seen by the passes in half-compute mode.
    compute: Option<Denoiser<T>>,
    ema: ParamSet<T>,
    grads: ParamSet<T>,
    opt: AdamState<T>,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    losses: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// The network is initialized from `train_config.seed`, and the same seed
    /// drives every timestep and noise draw.
    pub fn new(image: Tensor<T>, denoiser_config: &DenoiserConfig, train_config: &TrainConfig, schedule: &NoiseSchedule) -> Result<Self> {
        train_config.validate()?;
        let denoiser = Denoiser::new(denoiser_config, train_config.seed)?.with_timesteps(schedule.steps());
        denoiser.check_input(&image)?;
        if !image.all_finite() {
            return Err(Error::InvalidConfig("training image contains non-finite values".into()));
        }
        let params = denoiser.params();
        let compute = (train_config.precision == Precision::HalfComputeSingleMaster).then(|| denoiser.clone());
        Ok(Trainer {
            image,
            ema: params.clone(),
            grads: params.zeros_like(),
            opt: AdamState::new(params),
            compute,
            denoiser,
            schedule: schedule.clone(),
            config: train_config.clone(),
            rng: ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x7261_696e),
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Per-step mean losses so far; entry `i` belongs to step `i + 1`.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn denoiser(&self) -> &Denoiser<T> {
        &self.denoiser
    }

    pub fn ema_params(&self) -> &ParamSet<T> {
        &self.ema
    }

    /// One optimization step; returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.step + 1;
        let steps = self.schedule.steps();
        let (c, h, w) = self.image.shape();
        let mut ts = Vec::with_capacity(self.config.batch);
        let mut eps = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            ts.push(self.rng.random_range(1..=steps));
            eps.push(Tensor::randn(c, h, w, &mut self.rng));
        }
        self.grads.fill_zero();
        let net = match &mut self.compute {
            Some(compute) => {
                round_to_half(compute.params_mut(), self.denoiser.params());
                &*compute
            }
            None => &self.denoiser,
        };
        let loss = loss_and_grad(net, &self.image, &ts, &eps, &self.schedule, &mut self.grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss".into(), step });
        }
        if self.compute.is_some() {
            let g = self.grads.clone();
            round_to_half(&mut self.grads, &g);
        }
        if let Some(max) = self.config.clip() {
            clip_grad_norm(&mut self.grads, max);
        }
        let hyper = AdamHyper {
            learning_rate: self.config.learning_rate,
            weight_decay: self.config.weight_decay,
        };
        optimizer_step(self.denoiser.params_mut(), &self.grads, &mut self.opt, hyper).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            other => other,
        })?;
        ema_update(&mut self.ema, self.denoiser.params(), self.config.ema_decay)?;
        self.step = step;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            denoiser_config: self.denoiser.config().clone(),
            schedule_params: self.schedule.params(),
            raw_params: self.denoiser.params().clone(),
            ema_params: self.ema.clone(),
            step: self.step,
            train_config: self.config.clone(),
            format_version: CHECKPOINT_FORMAT_VERSION,
        }
    }

    /// Runs the remaining steps, handing a snapshot to `on_checkpoint` every
    /// `checkpoint_interval` steps and after the last one.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Checkpoint<T>) -> Result<()>) -> Result<Checkpoint<T>> {
        let every = self.config.checkpoint_interval;
        while !self.is_done() {
            self.step()?;
            if every > 0 && self.step.is_multiple_of(every) && !self.is_done() {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        let ck = self.checkpoint();
        on_checkpoint(&ck)?;
        Ok(ck)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub losses: Vec<f64>,
}

/// Trains a fresh network on `image` (values in `[-1, 1]`).
pub fn train<T: Scalar>(image: &Tensor<T>, denoiser_config: &DenoiserConfig, train_config: &TrainConfig, schedule: &NoiseSchedule) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(image.clone(), denoiser_config, train_config, schedule)?;
    let checkpoint = trainer.run(|_| Ok(()))?;
    Ok(TrainOutcome {
        checkpoint,
        losses: trainer.losses,
    })
}

/// Mean of the first and last `window` entries.
pub fn loss_window_means(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || losses.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exact(Tensor<f64>);

    impl NoisePredictor<f64> for Exact {
        fn predict_noise(&self, _: &Tensor<f64>, _: usize) -> Result<Tensor<f64>> {
            Ok(self.0.clone())
        }

        fn image_channels(&self) -> usize {
            self.0.channels()
        }
    }

    #[test]
    fn loss_of_exact_prediction_is_zero() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::full(3, 4, 4, 0.3);
        let e = Tensor::from_fn(3, 4, 4, |c, y, x| (c + y * x) as f64 * 0.1);
        let l = denoising_loss(&Exact(e.clone()), &x0, &[5], &[e], &s).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_prediction_against_unit_noise() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let d = Denoiser::<f64>::new(&DenoiserConfig::small(), 0).unwrap();
        let x0 = Tensor::zeros(3, 8, 8);
        let e = Tensor::full(3, 8, 8, 1.0);
        let l = denoising_loss(&d, &x0, &[3, 9], &[e.clone(), e], &s).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn rejects_bad_train_configs() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { total_steps: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { batch: 0, ..ok.clone() },
            TrainConfig { ema_decay: 1.5, ..ok.clone() },
            TrainConfig { grad_clip_norm: Some(-1.0), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn window_means() {
        let l = [4.0, 2.0, 1.0, 1.0, 0.0];
        assert_eq!(loss_window_means(&l, 2), Some((3.0, 0.5)));
        assert_eq!(loss_window_means(&l, 6), None);
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f32>::randn(3, 8, 8, &mut rng).map(|v| v.tanh());
        let tc = TrainConfig {
            total_steps: 4,
            batch: 2,
            ema_decay: 0.9,
            ..Default::default()
        };
        let cfg = DenoiserConfig::small();
        let a = train(&img, &cfg, &tc, &s).unwrap();
        let b = train(&img, &cfg, &tc, &s).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint.step, 4);
        assert_ne!(a.checkpoint.raw_params, a.checkpoint.ema_params);
    }

    #[test]
    fn half_compute_mode_trains() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f32>::randn(3, 8, 8, &mut rng).map(|v| v.tanh());
        let tc = TrainConfig {
            total_steps: 3,
            batch: 1,
            precision: Precision::HalfComputeSingleMaster,
            ..Default::default()
        };
        let out = train(&img, &DenoiserConfig::small(), &tc, &s).unwrap();
        assert!(out.losses.iter().all(|l| l.is_finite()));
        let single = train(&img, &DenoiserConfig::small(), &TrainConfig { precision: Precision::Single, ..tc }, &s).unwrap();
        assert_ne!(out.checkpoint.raw_params, single.checkpoint.raw_params);
    }

    #[test]
    fn divergence_reports_step() {
        // An absurd learning rate overflows single precision within a few steps.
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let img = Tensor::<f32>::full(3, 8, 8, 0.5);
        let tc = TrainConfig {
            total_steps: 50,
            batch: 1,
            learning_rate: 1e30,
            grad_clip_norm: None,
            ..Default::default()
        };
        let mut tr = Trainer::new(img, &DenoiserConfig::small(), &tc, &s).unwrap();
        let err = loop {
            match tr.step() {
                Ok(_) => assert!(!tr.is_done(), "training did not diverge"),
                Err(e) => break e,
            }
        };
        match err {
            Error::NonFinite { step, .. } => assert_eq!(step, tr.step_count() + 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interval_checkpoints() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let img = Tensor::<f32>::zeros(3, 4, 4);
        let tc = TrainConfig {
            total_steps: 5,
            batch: 1,
            checkpoint_interval: 2,
            ..Default::default()
        };
        let mut tr = Trainer::new(img, &DenoiserConfig::small(), &tc, &s).unwrap();
        let mut seen = Vec::new();
        tr.run(|c| {
            seen.push(c.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4, 5]);
    }
}
