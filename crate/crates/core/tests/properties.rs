use nalgebra::{DMatrix, DVector};
use patchdiff::metrics::{fit_stats, frechet_distance, FeatureStats};
use patchdiff::nn::ParamSet;
use patchdiff::sample::lowpass;
use patchdiff::train::{denoising_loss, ema_update};
use patchdiff::{Denoiser, DenoiserConfig, NoisePredictor, NoiseSchedule, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, c * h * w).prop_map(move |v| Tensor::from_vec(c, h, w, v).unwrap())
}

fn params(values: Vec<f64>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.push("a", vec![values.len()], values);
    p
}

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| {
        let a = DMatrix::from_vec(d, d, v);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    })
}

fn tiny_net(seed: u64) -> Denoiser<f64> {
    let cfg = DenoiserConfig {
        image_channels: 1,
        stages: 2,
        channels: vec![3, 3],
        enc_resblocks: 1,
        dec_resblocks: 1,
        time_embed_dim: 4,
        norm_groups: 1,
        zero_init_output: false,
        ..DenoiserConfig::default()
    };
    Denoiser::new(&cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lowpass_is_linear(x in tensor(2, 8, 8), y in tensor(2, 8, 8), a in -2.0f64..2.0, b in -2.0f64..2.0, n in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let combo = x.zip_map(&y, |p, q| a * p + b * q);
        let lhs = lowpass(&combo, n).unwrap();
        let rhs = lowpass(&x, n).unwrap().zip_map(&lowpass(&y, n).unwrap(), |p, q| a * p + b * q);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn lowpass_is_idempotent(x in tensor(3, 8, 12), n in prop::sample::select(vec![2usize, 4])) {
        let once = lowpass(&x, n).unwrap();
        prop_assert!(lowpass(&once, n).unwrap().max_abs_diff(&once) <= 1e-12);
    }

    #[test]
    fn ema_twice_equals_squared_decay(e in prop::collection::vec(-5.0f64..5.0, 6), p in prop::collection::vec(-5.0f64..5.0, 6), d in 0.0f64..1.0) {
        let target = params(p);
        let mut twice = params(e.clone());
        ema_update(&mut twice, &target, d).unwrap();
        ema_update(&mut twice, &target, d).unwrap();
        let mut once = params(e);
        ema_update(&mut once, &target, d * d).unwrap();
        for (a, b) in twice.iter().zip(once.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn schedule_is_monotone(steps in 2usize..400, start in 1e-5f64..1e-2, span in 0.0f64..0.05) {
        let s = NoiseSchedule::linear(steps, start, start + span).unwrap();
        for t in 1..steps {
            prop_assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
            prop_assert!(s.snr(t + 1).unwrap() < s.snr(t).unwrap());
        }
    }

    #[test]
    fn loss_is_non_negative(seed in 0u64..1000, t in 1usize..1000) {
        let net = tiny_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::<f64>::randn(1, 4, 4, &mut rng);
        let eps = vec![Tensor::randn(1, 4, 4, &mut rng)];
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        prop_assert!(denoising_loss(&net, &x0, &[t], &eps, &s).unwrap() >= 0.0);
    }

    #[test]
    fn output_shape_matches_input(hm in 1usize..5, wm in 1usize..5, seed in 0u64..100) {
        let net = tiny_net(seed);
        let x = Tensor::<f64>::zeros(1, 2 * hm, 2 * wm);
        prop_assert_eq!(net.predict_noise(&x, 10).unwrap().shape(), x.shape());
    }

    #[test]
    fn frechet_is_symmetric(a in spd(4), b in spd(4), m in prop::collection::vec(-1.0f64..1.0, 8)) {
        let x = FeatureStats { mu: DVector::from_column_slice(&m[..4]), sigma: a };
        let y = FeatureStats { mu: DVector::from_column_slice(&m[4..]), sigma: b };
        let xy = frechet_distance(&x, &y).unwrap().raw;
        let yx = frechet_distance(&y, &x).unwrap().raw;
        prop_assert!((xy - yx).abs() <= 1e-8 * xy.abs().max(1.0));
        prop_assert!(xy >= -1e-6);
    }

    #[test]
    fn frechet_terms_scale_quadratically(f in prop::collection::vec(-2.0f64..2.0, 30), g in prop::collection::vec(-2.0f64..2.0, 30), c in 0.1f64..5.0) {
        let fa = DMatrix::from_row_slice(10, 3, &f);
        let fb = DMatrix::from_row_slice(10, 3, &g);
        let base = frechet_distance(&fit_stats(&fa).unwrap(), &fit_stats(&fb).unwrap()).unwrap();
        let scaled = frechet_distance(&fit_stats(&(&fa * c)).unwrap(), &fit_stats(&(&fb * c)).unwrap()).unwrap();
        let c2 = c * c;
        prop_assert!((scaled.mean_term - c2 * base.mean_term).abs() <= 1e-9 * (1.0 + c2 * base.mean_term));
        prop_assert!((scaled.trace_term - c2 * base.trace_term).abs() <= 1e-7 * (1.0 + c2 * base.trace_term.abs()));
    }

    #[test]
    fn identical_singular_stats_are_at_zero(v in prop::collection::vec(-2.0f64..2.0, 5), mu in prop::collection::vec(-1.0f64..1.0, 5)) {
        let v = DVector::from_vec(v);
        let s = FeatureStats { mu: DVector::from_vec(mu), sigma: &v * v.transpose() };
        prop_assert!(frechet_distance(&s, &s).unwrap().value <= 1e-6);
    }
}
