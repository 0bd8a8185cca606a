use patchdiff::nn::receptive_field;
use patchdiff::{Denoiser, DenoiserConfig, Error, NoisePredictor, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Frozen from tests/fixtures/param_count.py.
const DEFAULT_PARAMS: usize = 5_585_091;
const ENHANCED_PARAMS: usize = 34_626_627;
const SMALL_PARAMS: usize = 58_563;

#[test]
fn parameter_counts_match_the_shape_walk() {
    assert_eq!(Denoiser::<f32>::new(&DenoiserConfig::default(), 0).unwrap().param_count(), DEFAULT_PARAMS);
    assert_eq!(Denoiser::<f32>::new(&DenoiserConfig::enhanced(), 0).unwrap().param_count(), ENHANCED_PARAMS);
    assert_eq!(Denoiser::<f32>::new(&DenoiserConfig::small(), 0).unwrap().param_count(), SMALL_PARAMS);
}

#[test]
fn default_net_maps_64_to_64_and_starts_at_zero() {
    let net = Denoiser::<f32>::new(&DenoiserConfig::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(3, 64, 64, &mut rng);
    let y = net.predict_noise(&x, 500).unwrap();
    assert_eq!(y.shape(), (3, 64, 64));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bad_groups_and_sizes_are_rejected() {
    let cfg = DenoiserConfig {
        norm_groups: 7,
        ..DenoiserConfig::default()
    };
    assert!(matches!(Denoiser::<f32>::new(&cfg, 0), Err(Error::InvalidConfig(_))));
    let net = Denoiser::<f32>::new(&DenoiserConfig::small(), 0).unwrap();
    match net.predict_noise(&Tensor::zeros(3, 63, 64), 1) {
        Err(Error::Divisibility { multiple, .. }) => assert_eq!(multiple, 2),
        other => panic!("unexpected {other:?}"),
    }
    for t in [0, 1001] {
        assert!(matches!(
            net.predict_noise(&Tensor::zeros(3, 64, 64), t),
            Err(Error::TimestepOutOfRange { min: 1, max: 1000, .. })
        ));
    }
    assert!(net.predict_noise(&Tensor::zeros(3, 64, 64), 1000).is_ok());
}

#[test]
fn same_seed_same_weights() {
    let a = Denoiser::<f32>::new(&DenoiserConfig::small(), 9).unwrap();
    let b = Denoiser::<f32>::new(&DenoiserConfig::small(), 9).unwrap();
    assert_eq!(a.params(), b.params());
}

fn probe_config() -> DenoiserConfig {
    DenoiserConfig {
        stages: 2,
        channels: vec![6, 6],
        enc_resblocks: 1,
        dec_resblocks: 1,
        time_embed_dim: 4,
        norm_groups: 2,
        zero_init_output: false,
        ..DenoiserConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Inputs farther than the receptive field never reach an output pixel.
    #[test]
    fn outputs_ignore_inputs_outside_the_receptive_field(
        seed in 0u64..50,
        py in 0usize..64,
        px in 0usize..64,
        qy in 0usize..64,
        qx in 0usize..64,
        t in 1usize..1000,
    ) {
        let cfg = probe_config();
        let rf = receptive_field(&cfg).unwrap().width_px;
        prop_assume!(py.abs_diff(qy) >= rf || px.abs_diff(qx) >= rf);
        let net = Denoiser::<f32>::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(3, 64, 64, &mut rng);
        let mut xp = x.clone();
        *xp.at_mut(0, qy, qx) += 5.0;
        let a = net.predict_noise(&x, t).unwrap();
        let b = net.predict_noise(&xp, t).unwrap();
        for c in 0..3 {
            prop_assert_eq!(a.at(c, py, px), b.at(c, py, px));
        }
    }

    /// Shifting by a multiple of the downsampling factor shifts the
    /// interior of the output.
    #[test]
    fn interior_is_shift_equivariant(seed in 0u64..50, s in 1usize..4) {
        let cfg = probe_config();
        let rf = receptive_field(&cfg).unwrap().width_px;
        let net = Denoiser::<f32>::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 96;
        let shift = 2 * s;
        let x = Tensor::randn(3, n, n, &mut rng);
        let a = net.predict_noise(&x, 300).unwrap();
        let b = net.predict_noise(&x.roll(shift, shift), 300).unwrap();
        for c in 0..3 {
            for y in shift + rf..n - rf {
                for xx in shift + rf..n - rf {
                    prop_assert!((b.at(c, y, xx) - a.at(c, y - shift, xx - shift)).abs() <= 1e-5);
                }
            }
        }
    }
}
