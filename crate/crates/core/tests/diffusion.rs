use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use relgen_core::diffusion::{
    forward_noise, forward_noise_at, predict_z0, predict_z0_at, LatentGrid, NoiseSchedule, ScheduleConfig,
    ScheduleFamily, ToyCodec,
};
use relgen_core::image::Image;
use relgen_core::tensor::Mat;

fn linear(t: usize) -> ScheduleConfig {
    ScheduleConfig { family: ScheduleFamily::Linear, steps: t, beta_start: 1e-4, beta_end: 2e-2 }
}

/// ᾱ_t as a product written out from the β definition.
fn alpha_bar_oracle(cfg: ScheduleConfig, t: usize) -> f64 {
    let n = cfg.steps as f64 - 1.0;
    (0..=t)
        .map(|s| {
            let frac = s as f64 / n;
            let beta = match cfg.family {
                ScheduleFamily::Linear => cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start),
                ScheduleFamily::ScaledLinear => {
                    (cfg.beta_start.sqrt() + frac * (cfg.beta_end.sqrt() - cfg.beta_start.sqrt())).powi(2)
                }
            };
            1.0 - beta
        })
        .product()
}

#[test]
fn alpha_bar_matches_product_of_betas() {
    for cfg in [linear(1000), ScheduleConfig { family: ScheduleFamily::ScaledLinear, beta_start: 8.5e-4, beta_end: 1.2e-2, steps: 1000 }] {
        let s = NoiseSchedule::new(cfg).unwrap();
        for t in [0, 1, 10, 250, 500, 999] {
            let want = alpha_bar_oracle(cfg, t);
            assert!((s.alpha_bar(t).unwrap() - want).abs() < 1e-12, "t = {t}");
        }
    }
}

#[test]
fn default_schedule_endpoints() {
    let s = NoiseSchedule::default();
    assert_eq!(s.len(), 1000);
    assert!((s.alpha_bar(0).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
    let last = s.alpha_bar(999).unwrap();
    assert!(last > 0.0 && last < 1e-3);
    assert!(s.alpha_bar(1000).is_err());
}

#[test]
fn bad_schedules_are_rejected() {
    assert!(NoiseSchedule::new(ScheduleConfig { steps: 0, ..linear(1) }).is_err());
    assert!(NoiseSchedule::new(ScheduleConfig { beta_start: 0.0, ..linear(10) }).is_err());
    assert!(NoiseSchedule::new(ScheduleConfig { beta_start: 0.3, beta_end: 0.1, ..linear(10) }).is_err());
    assert!(NoiseSchedule::new(ScheduleConfig { beta_start: 5e-3, beta_end: 1e-2, ..linear(10) }).is_err());
}

#[test]
fn t_zero_forward_noise_is_nearly_clean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = NoiseSchedule::default();
    let z0 = Mat::randn(16, 4, 1.0, &mut rng);
    let eps = Mat::randn(16, 4, 1.0, &mut rng);
    let zt = forward_noise_at(&z0, &eps, s.alpha_bar(0).unwrap()).unwrap();
    assert!(zt.max_abs_diff(&z0) < 0.05);
}

#[test]
fn singular_noise_level_is_an_error() {
    let z = Mat::zeros(2, 2);
    assert!(matches!(predict_z0_at(&z, &z, 3, 0.0), Err(relgen_core::Error::Singular { t: 3 })));
}

#[test]
fn grid_variants_agree_with_matrix_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = NoiseSchedule::default();
    let z0 = LatentGrid::new(4, 4, 8, Mat::randn(16, 4, 1.0, &mut rng)).unwrap();
    let eps = LatentGrid::new(4, 4, 8, Mat::randn(16, 4, 1.0, &mut rng)).unwrap();
    let zt = forward_noise(&z0, 400, &eps, &s).unwrap();
    let back = predict_z0(&zt, &eps, 400, &s).unwrap();
    assert!(back.tokens().max_abs_diff(z0.tokens()) < 1e-12);
    let other = LatentGrid::new(2, 8, 8, Mat::zeros(16, 4)).unwrap();
    assert!(forward_noise(&z0, 0, &other, &s).is_err());
}

#[test]
fn codec_round_trips_flat_patches() {
    let codec = ToyCodec::new(8);
    let img = Image::from_fn(64, 64, |x, y| {
        let (bx, by) = ((x / 8) as f64, (y / 8) as f64);
        [bx / 8.0, by / 8.0, 0.5]
    });
    let z = codec.encode(&img).unwrap();
    assert_eq!((z.height(), z.width(), z.channels()), (8, 8, 4));
    let back = codec.decode(&z).unwrap();
    let err = img.as_slice().iter().zip(back.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_then_recover_is_identity(seed in 0u64..10_000, t in 0usize..1000, fam in 0usize..2) {
        let cfg = if fam == 0 { linear(1000) } else {
            ScheduleConfig { family: ScheduleFamily::ScaledLinear, steps: 1000, beta_start: 8.5e-4, beta_end: 1.2e-2 }
        };
        let s = NoiseSchedule::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = Mat::randn(8, 4, 1.0, &mut rng);
        let eps = Mat::randn(8, 4, 1.0, &mut rng);
        let ab = s.alpha_bar(t).unwrap();
        let zt = forward_noise_at(&z0, &eps, ab).unwrap();
        let back = predict_z0_at(&zt, &eps, t, ab).unwrap();
        prop_assert!(back.max_abs_diff(&z0) < 1e-6);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing(steps in 2usize..2000, lo in 1e-5f64..1e-3, span in 0.0f64..3e-2) {
        let cfg = ScheduleConfig { family: ScheduleFamily::Linear, steps, beta_start: lo, beta_end: lo + span };
        let s = NoiseSchedule::new(cfg).unwrap();
        for w in s.alpha_bars().windows(2) {
            prop_assert!(w[1] < w[0] && w[1] > 0.0);
        }
    }

    #[test]
    fn forward_noise_is_affine_in_eps(seed in 0u64..1000, ab in 0.001f64..0.999) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = Mat::randn(4, 4, 1.0, &mut rng);
        let e1 = Mat::randn(4, 4, 1.0, &mut rng);
        let e2 = Mat::randn(4, 4, 1.0, &mut rng);
        let a = forward_noise_at(&z0, &e1, ab).unwrap();
        let b = forward_noise_at(&z0, &e2, ab).unwrap();
        let expect = e1.sub(&e2).scale((1.0 - ab).sqrt());
        prop_assert!(a.sub(&b).max_abs_diff(&expect) < 1e-12);
    }
}
