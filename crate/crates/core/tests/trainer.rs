mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{attach_random_adapters, central_diff, pipeline_and_data, rel_diff};
use relgen_core::data::Keypoint;
use relgen_core::graph::Graph;
use relgen_core::tensor::Mat;
use relgen_core::trainer::{
    draw_batch, finetune, keypoint_to_latent, kml_loss, kml_pairs, kml_var, prepare, read_log, total_loss,
    AblationMode, TrainConfig,
};

fn kp(x: f64, y: f64, v: u8) -> Keypoint {
    Keypoint { x, y, v }
}

#[test]
fn keypoints_map_by_floor_division() {
    let kps = [kp(17.9, 3.0, 2), kp(63.99, 0.0, 1), kp(-4.0, 70.0, 2), kp(30.0, 30.0, 0)];
    let m = keypoint_to_latent(&kps, 8, 8, 8);
    assert_eq!(m, vec![Some([2, 0]), Some([7, 0]), Some([0, 7]), None]);
}

#[test]
fn pairs_drop_either_invisible_side() {
    let z = vec![Some([1, 2]), None, Some([3, 0]), Some([0, 0])];
    let c = vec![Some([0, 1]), Some([4, 4]), None, Some([7, 7])];
    assert_eq!(kml_pairs(&z, &c, 8).unwrap(), vec![(17, 8), (0, 63)]);
    assert!(kml_pairs(&z, &c[..3], 8).is_err());
}

#[test]
fn kml_matches_a_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Mat::randn(16, 4, 1.0, &mut rng);
    let e = Mat::randn(16, 4, 1.0, &mut rng);
    let pairs = [(0, 3), (5, 5), (15, 0)];
    let mut expect = 0.0;
    for &(a, b) in &pairs {
        for c in 0..4 {
            expect += (e.get(b, c) - z.get(a, c)).powi(2);
        }
    }
    let v = kml_loss(&z, &e, &pairs).unwrap();
    assert!((v.loss - expect / 3.0).abs() < 1e-12);
    assert_eq!((v.visible, v.warning), (3, false));
    assert!(kml_loss(&z, &e, &[(16, 0)]).is_err());
}

#[test]
fn kml_gradient_is_twice_the_residual_over_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Mat::randn(16, 4, 1.0, &mut rng);
    let rows = vec![1, 6, 9, 14];
    let target = Mat::randn(rows.len(), 4, 1.0, &mut rng);
    let g = Graph::free();
    let zv = g.variable(z.clone());
    let loss = kml_var(&g, zv, &rows, &target);
    let grad = g.backward(loss).wrt(zv).unwrap().clone();

    let mut oracle = Mat::zeros(16, 4);
    for (k, &r) in rows.iter().enumerate() {
        for c in 0..4 {
            oracle.set(r, c, 2.0 * (z.get(r, c) - target.get(k, c)) / rows.len() as f64);
        }
    }
    assert!(grad.max_abs_diff(&oracle) < 1e-12);

    let eval = |m: &Mat| {
        let g = Graph::free();
        let v = g.constant(m.clone());
        g.scalar(kml_var(&g, v, &rows, &target))
    };
    assert!(rel_diff(&grad, &central_diff(&z, 1e-6, eval)) < 1e-3);
}

#[test]
fn kml_contribution_is_linear_in_lambda() {
    let (mut p, data) = pipeline_and_data(1);
    let cfg = TrainConfig::default();
    attach_random_adapters(&mut p, &cfg, 0.05);
    let items = prepare(&p, &data, &cfg).unwrap();
    assert!(items.iter().all(|i| !i.kml_rows.is_empty()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = draw_batch(&mut rng, &p, items.len(), 4);
    let base = total_loss(&p, &items, &batch, 0.0).unwrap();
    let mut ratios = Vec::new();
    for lambda in [1e-4, 1e-3, 1e-2] {
        let bg = total_loss(&p, &items, &batch, lambda).unwrap();
        let mut sq = 0.0;
        for (id, g) in &bg.grads {
            sq += g.sub(&base.grads[id]).sum_squares();
        }
        ratios.push(sq.sqrt() / lambda);
    }
    assert!(ratios[0] > 0.0);
    for r in &ratios[1..] {
        assert!((r - ratios[0]).abs() / ratios[0] < 1e-6, "{ratios:?}");
    }
}

#[test]
fn finetune_leaves_frozen_weights_untouched() {
    let (mut p, data) = pipeline_and_data(1);
    let before = p.params.frozen_checksum();
    let frozen: Vec<Mat> = p.params.ids().map(|id| p.params.value(id).clone()).collect();
    let cfg = TrainConfig { steps: 10, batch_size: 2, ..Default::default() };
    let report = finetune(&mut p, &data, &cfg).unwrap();
    assert_eq!(report.frozen_checksum, before);
    assert_eq!(p.params.frozen_checksum(), before);
    for (id, v) in p.params.ids().zip(&frozen) {
        assert_eq!(p.params.value(id), v, "{}", p.params.name(id));
    }
    let mut adapters = p.denoiser.adapter_ids();
    adapters.sort();
    assert_eq!(p.params.trainable_ids(), adapters);
    assert_eq!(report.adapters.entries.len(), 4 * p.denoiser.blocks().len());
    assert!(finetune(&mut p, &data, &cfg).is_err());
}

#[test]
fn trained_gates_join_the_trainable_set() {
    let (mut p, data) = pipeline_and_data(1);
    let cfg = TrainConfig { steps: 2, batch_size: 2, train_extractor_gates: true, ..Default::default() };
    finetune(&mut p, &data, &cfg).unwrap();
    let mut expect = p.denoiser.adapter_ids();
    expect.extend(p.extractor.gate_ids());
    expect.sort();
    assert_eq!(p.params.trainable_ids(), expect);
}

#[test]
fn same_seed_replays_the_loss_log() {
    let cfg = TrainConfig { steps: 6, batch_size: 2, ..Default::default() };
    let run = || {
        let (mut p, data) = pipeline_and_data(1);
        finetune(&mut p, &data, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.adapters, b.adapters);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    a.write_log(&path).unwrap();
    assert_eq!(read_log(&path).unwrap(), a.log);
}

#[test]
fn ablation_modes_switch_the_objective() {
    let data = pipeline_and_data(1).1;
    for mode in AblationMode::ALL {
        let (mut p, _) = pipeline_and_data(0);
        let cfg = TrainConfig { steps: 2, batch_size: 2, ablation_mode: mode, ..Default::default() };
        let r = finetune(&mut p, &data, &cfg).unwrap();
        let kml_active = r.log.iter().any(|e| e.kml > 0.0);
        assert_eq!(kml_active, mode.uses_kml(), "{mode}");
        assert_eq!(p.extractor.config.no_local_tokens, mode == AblationMode::NoLocalTokens);
        if !mode.uses_kml() {
            assert!(r.log.iter().all(|e| e.total == e.denoise));
        }
    }
    let cfg = TrainConfig { ablation_mode: AblationMode::BlankImagePrompt, ..Default::default() };
    let (p, _) = pipeline_and_data(0);
    let blank = prepare(&p, &data[..1], &cfg).unwrap();
    let mut swapped = data[..1].to_vec();
    swapped[0].prompts.reverse();
    let blank_swapped = prepare(&p, &swapped, &cfg).unwrap();
    match (&blank[0].ci, &blank_swapped[0].ci) {
        (relgen_core::trainer::Condition::Fixed(a), relgen_core::trainer::Condition::Fixed(b)) => assert_eq!(a, b),
        _ => panic!("expected fixed conditions"),
    }
}

#[test]
fn bad_configs_and_small_sets_are_rejected() {
    let (mut p, data) = pipeline_and_data(1);
    assert!(finetune(&mut p, &data[..3], &TrainConfig::default()).is_err());
    for cfg in [
        TrainConfig { lambda_kml: -1.0, ..Default::default() },
        TrainConfig { gamma: 1.5, ..Default::default() },
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { steps: 0, ..Default::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_timesteps_cover_the_schedule(seed in 0u64..1_000_000, batch in 1usize..16) {
        let (p, _) = pipeline_and_data(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = draw_batch(&mut rng, &p, 3, batch);
        let steps = p.schedule.len();
        for (k, s) in b.iter().enumerate() {
            prop_assert!(s.item < 3);
            prop_assert!(s.t >= k * steps / batch && s.t < ((k + 1) * steps).div_ceil(batch));
        }
    }
}
