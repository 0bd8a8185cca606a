//! AdamW and the EMA shadow update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment accumulators plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// One AdamW update. Weight decay shrinks the parameters directly and never
/// enters the moment estimates.
///
/// A non-finite gradient leaves everything untouched and reports
/// [`Error::NonFinite`] with the update index it would have had.
pub fn optimizer_step<T: Scalar>(params: &mut ParamSet<T>, grads: &ParamSet<T>, state: &mut AdamState<T>, hyper: AdamHyper) -> Result<()> {
    params.ensure_compatible(grads, "optimizer gradients")?;
    params.ensure_compatible(&state.m, "optimizer first moment")?;
    params.ensure_compatible(&state.v, "optimizer second moment")?;
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            step: state.step as usize + 1,
        });
    }
    state.step += 1;
    let n = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(n);
    let bc2 = 1.0 - ADAM_BETA2.powi(n);
    let decay = 1.0 - hyper.learning_rate * hyper.weight_decay;
    let arrays = params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for ((p, g), (m, v)) in arrays {
        for i in 0..p.data.len() {
            let gi = g.data[i].as_f64();
            let mi = ADAM_BETA1 * m.data[i].as_f64() + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data[i].as_f64() + (1.0 - ADAM_BETA2) * gi * gi;
            m.data[i] = T::of(mi);
            v.data[i] = T::of(vi);
            let update = (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            p.data[i] = T::of(p.data[i].as_f64() * decay - hyper.learning_rate * update);
        }
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`
pub fn ema_update<T: Scalar>(ema: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidRange(format!("ema decay {decay} outside [0, 1]")));
    }
    ema.ensure_compatible(params, "ema update")?;
    let d = T::of(decay);
    let keep = T::of(1.0 - decay);
    for (e, p) in ema.iter_mut().zip(params.iter()) {
        for (a, &b) in e.data.iter_mut().zip(&p.data) {
            *a = d * *a + keep * b;
        }
    }
    Ok(())
}

/// Scales `grads` so their global Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for a in grads.iter_mut() {
            a.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", vec![1], vec![v]);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_set(0.7);
        let g = scalar_set(0.0);
        let mut s = AdamState::new(&p);
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.0,
        };
        optimizer_step(&mut p, &g, &mut s, hyper).unwrap();
        assert_eq!(p.get(crate::nn::ParamId(0)), &[0.7]);
        assert_eq!(s.m.l2_norm(), 0.0);
        assert_eq!(s.v.l2_norm(), 0.0);
    }

    #[test]
    fn first_step_matches_hand_arithmetic() {
        let mut p = scalar_set(0.5);
        let g = scalar_set(1.0);
        let mut s = AdamState::new(&p);
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.0,
        };
        optimizer_step(&mut p, &g, &mut s, hyper).unwrap();
        // m = 0.1, v = 0.001; corrected: m_hat = 1, v_hat = 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = 0.5 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        let got = p.get(crate::nn::ParamId(0))[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - 0.400_000_001).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let mut p = scalar_set(2.0);
        let g = scalar_set(0.0);
        let mut s = AdamState::new(&p);
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.1,
        };
        optimizer_step(&mut p, &g, &mut s, hyper).unwrap();
        assert!((p.get(crate::nn::ParamId(0))[0] - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar_set(1.0);
        let g = scalar_set(f64::NAN);
        let mut s = AdamState::new(&p);
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.0,
        };
        let err = optimizer_step(&mut p, &g, &mut s, hyper).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn ema_endpoints() {
        let params = scalar_set(1.0);
        let mut ema = scalar_set(0.0);
        ema_update(&mut ema, &params, 0.9999).unwrap();
        assert!((ema.get(crate::nn::ParamId(0))[0] - 1e-4).abs() < 1e-16);
        let mut ema = scalar_set(0.3);
        ema_update(&mut ema, &params, 1.0).unwrap();
        assert_eq!(ema.get(crate::nn::ParamId(0))[0], 0.3);
        ema_update(&mut ema, &params, 0.0).unwrap();
        assert_eq!(ema, params);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = ParamSet::<f64>::new();
        g.push("a", vec![2], vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.l2_norm() - 1.0).abs() < 1e-12);
    }
}
