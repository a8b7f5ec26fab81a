mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{central_diff, rel_diff};
use relgen_core::embedding::{EmbeddingBackend, MeanColorBackend};
use relgen_core::graph::Graph;
use relgen_core::image::Image;
use relgen_core::local_encoder::{
    dense_features, distill_loss, distill_loss_var, partition_pool, pooling_matrix, principal_components,
    synthetic_images, teacher_crop_tokens, DenseFeatureMap, LastLayer, LocalEncoder, LocalEncoderConfig,
};
use relgen_core::nn::{Ffn, Linear, Norm};
use relgen_core::params::ParamSet;
use relgen_core::tensor::Mat;

fn encoder(grid: usize) -> (ParamSet, LocalEncoder) {
    let mut p = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LocalEncoderConfig { grid, ..LocalEncoderConfig::default() };
    let enc = LocalEncoder::new(&mut p, cfg, &mut rng).unwrap();
    (p, enc)
}

/// Cell means computed position by position.
fn pool_oracle(map: &DenseFeatureMap, grid: usize) -> Mat {
    let (ch, cw) = (map.height / grid, map.width / grid);
    let d = map.features.cols();
    let mut out = Mat::zeros(grid * grid, d);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..d {
                let mut s = 0.0;
                for y in gy * ch..(gy + 1) * ch {
                    for x in gx * cw..(gx + 1) * cw {
                        s += map.features.get(y * map.width + x, c);
                    }
                }
                out.set(gy * grid + gx, c, s / (ch * cw) as f64);
            }
        }
    }
    out
}

fn random_map(side: usize, d: usize, seed: u64) -> DenseFeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseFeatureMap::new(side, side, Mat::randn(side * side, d, 1.0, &mut rng), (64, 64)).unwrap()
}

#[test]
fn partition_pool_matches_cell_means() {
    for grid in [1, 2, 4, 8] {
        let map = random_map(8, 5, grid as u64);
        assert!(partition_pool(&map, grid).unwrap().max_abs_diff(&pool_oracle(&map, grid)) < 1e-12);
    }
    assert!(pooling_matrix(8, 8, 3).is_err());
    assert!(pooling_matrix(8, 8, 0).is_err());
}

#[test]
fn grid_four_gives_sixteen_tokens() {
    let (p, enc) = encoder(4);
    let img = synthetic_images(1, 64, 0).remove(0);
    let b = enc.encode(&p, &img).unwrap();
    assert_eq!(b.tok_l.shape(), (16, 16));
    assert_eq!(b.tok_i.shape(), (1, 16));
}

#[test]
fn token_count_follows_grid() {
    for (grid, n) in [(1, 1), (2, 4), (8, 64)] {
        let (p, enc) = encoder(grid);
        let b = enc.encode(&p, &Image::filled(64, 64, [0.3, 0.6, 0.9])).unwrap();
        assert_eq!(b.tok_l.rows(), n);
    }
    let mut p = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(LocalEncoder::new(&mut p, LocalEncoderConfig { grid: 3, ..Default::default() }, &mut rng).is_err());
}

#[test]
fn identity_last_layer_doubles_the_input() {
    let mut p = ParamSet::new();
    let d = 6;
    let eye = Mat::identity(d);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ffn = Ffn::new(&mut p, "ffn", d, 4, false, &mut rng);
    p.set_value(ffn.fc2.weight, Mat::zeros(d, 4));
    if let Some(b) = ffn.fc2.bias {
        p.set_value(b, Mat::zeros(1, d));
    }
    let layer = LastLayer {
        norm: Norm::Identity,
        proj_v: Linear::from_weights(&mut p, "v", eye.clone(), None, false),
        proj_out: Linear::from_weights(&mut p, "o", eye, None, false),
        ffn,
    };
    let tokens = Mat::randn(1 + 9, d, 1.0, &mut rng);
    let map = dense_features(&p, &tokens, &layer, (24, 24)).unwrap();
    assert_eq!((map.height, map.width), (3, 3));
    for r in 0..9 {
        for c in 0..d {
            assert!((map.features.get(r, c) - 2.0 * tokens.get(r + 1, c)).abs() < 1e-12);
        }
    }
    assert!(dense_features(&p, &Mat::zeros(9, d), &layer, (24, 24)).is_err());
}

#[test]
fn distill_loss_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Mat::randn(4, 5, 1.0, &mut rng);
    assert!(distill_loss(&t, &t).unwrap().abs() < 1e-12);
    assert!((distill_loss(&t.scale(-1.0), &t).unwrap() - 2.0).abs() < 1e-12);
    assert!(distill_loss(&t.scale(3.0), &t).unwrap().abs() < 1e-12);
    assert!(distill_loss(&Mat::zeros(4, 5), &t).is_err());
    assert!(distill_loss(&t, &Mat::zeros(3, 5)).is_err());
}

#[test]
fn distill_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = Mat::randn(4, 5, 1.0, &mut rng);
    let t = Mat::randn(4, 5, 1.0, &mut rng);
    let g = Graph::free();
    let sv = g.variable(s.clone());
    let loss = distill_loss_var(&g, sv, &t).unwrap();
    assert!((g.scalar(loss) - distill_loss(&s, &t).unwrap()).abs() < 1e-12);
    let analytic = g.backward(loss).wrt(sv).unwrap().clone();
    let numeric = central_diff(&s, 1e-6, |m| distill_loss(m, &t).unwrap());
    assert!(rel_diff(&analytic, &numeric) < 1e-3);
}

#[test]
fn teacher_tokens_are_patch_mean_colours() {
    let img = Image::from_fn(64, 64, |x, y| [x as f64 / 63.0, y as f64 / 63.0, ((x + y) % 7) as f64 / 6.0]);
    let teacher = MeanColorBackend::new(6);
    let tokens = teacher_crop_tokens(&img, 4, &teacher).unwrap();
    assert_eq!(tokens.shape(), (16, 6));
    for cy in 0..4 {
        for cx in 0..4 {
            let mut m = [0.0; 3];
            for y in cy * 16..(cy + 1) * 16 {
                for x in cx * 16..(cx + 1) * 16 {
                    let c = img.get(x, y);
                    (0..3).for_each(|k| m[k] += c[k] / 256.0);
                }
            }
            let raw = [m[0], m[1], m[2], 1.0, 0.0, 0.0];
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (k, v) in raw.iter().enumerate() {
                assert!((tokens.get(cy * 4 + cx, k) - v / n).abs() < 1e-12);
            }
        }
    }
    let whole = teacher_crop_tokens(&img, 1, &teacher).unwrap();
    assert_eq!(whole.row(0), teacher.image_embed(&img).unwrap().as_slice());
    assert!(teacher_crop_tokens(&img, 5, &teacher).is_err());
}

#[test]
fn pca_recovers_a_dominant_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dir = [0.6, 0.0, 0.8, 0.0];
    let mut rows = Vec::new();
    for _ in 0..200 {
        let s: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        let noise = Mat::randn(1, 4, 0.01, &mut rng);
        rows.push((0..4).map(|k| 3.0 * s * dir[k] + noise.get(0, k) + 1.0).collect::<Vec<_>>());
    }
    let x = Mat::from_rows(&rows).unwrap();
    let pca = principal_components(&x, 2).unwrap();
    let c0 = pca.components.row(0);
    let dot: f64 = c0.iter().zip(dir).map(|(a, b)| a * b).sum();
    assert!(dot.abs() > 0.999);
    assert!(pca.variances[0] > 100.0 * pca.variances[1]);
    assert!(principal_components(&x, 5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pooling_preserves_the_global_mean(seed in 0u64..10_000, k in 0usize..4, d in 1usize..6) {
        let side = 8;
        let grid = [1, 2, 4, 8][k];
        let map = random_map(side, d, seed);
        let pooled = partition_pool(&map, grid).unwrap();
        for c in 0..d {
            let a: f64 = (0..pooled.rows()).map(|r| pooled.get(r, c)).sum::<f64>() / pooled.rows() as f64;
            let b: f64 = (0..map.features.rows()).map(|r| map.features.get(r, c)).sum::<f64>() / map.features.rows() as f64;
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pca_components_are_orthonormal_and_coords_consistent(seed in 0u64..10_000, n in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::randn(n, 5, 1.0, &mut rng);
        let pca = principal_components(&x, 2).unwrap();
        let gram = pca.components.matmul_t(&pca.components);
        prop_assert!(gram.max_abs_diff(&Mat::identity(2)) < 1e-9);
        prop_assert!(pca.variances[0] >= pca.variances[1]);
        for k in 0..2 {
            let var = (0..n).map(|r| pca.coords.get(r, k).powi(2)).sum::<f64>() / (n - 1) as f64;
            prop_assert!((var - pca.variances[k]).abs() < 1e-8 * (1.0 + var));
        }
    }
}
