mod common;

use common::pipeline_and_data;
use relgen_core::archive::{AdapterSet, Archive};
use relgen_core::data::Triplet;
use relgen_core::generation::{
    generate, generate_batch, grid_report, grid_shape, sampling_timesteps, GenerationRequest, GridSidecar,
    RequestFile, SubjectSpec,
};
use relgen_core::image::Image;
use relgen_core::pipeline::{ModelConfig, Pipeline};
use relgen_core::trainer::{configure, finetune, TrainConfig};

fn request(t: &Triplet, seed: u64, steps: usize) -> GenerationRequest {
    GenerationRequest {
        text_prompt: t.text.clone(),
        subjects: t
            .classes
            .iter()
            .zip(&t.boxes)
            .enumerate()
            .map(|(k, (c, b))| SubjectSpec { image: format!("ref{k}.png"), class: c.clone(), bbox: *b })
            .collect(),
        adapter_archive: None,
        seed,
        num_steps: steps,
        gamma: None,
    }
}

#[test]
fn same_request_and_seed_give_identical_images() {
    let (p, data) = pipeline_and_data(1);
    let req = request(&data[0], 5, 8);
    let a = generate(&p, &req, &data[0].prompts).unwrap();
    let b = generate(&p, &req, &data[0].prompts).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.metadata, b.metadata);
    let c = generate(&p, &GenerationRequest { seed: 6, ..req }, &data[0].prompts).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn zero_gamma_ignores_the_references() {
    let (p, data) = pipeline_and_data(1);
    let req = GenerationRequest { gamma: Some(0.0), ..request(&data[0], 1, 6) };
    let mut swapped = data[0].prompts.clone();
    swapped.reverse();
    let a = generate(&p, &req, &data[0].prompts).unwrap();
    let b = generate(&p, &req, &swapped).unwrap();
    assert_eq!(a.latent, b.latent);
    let open = GenerationRequest { gamma: Some(1.0), ..req };
    assert_ne!(generate(&p, &open, &data[0].prompts).unwrap().latent, generate(&p, &open, &swapped).unwrap().latent);
}

#[test]
fn zero_b_adapters_match_the_base_model() {
    let (mut p, data) = pipeline_and_data(1);
    let req = request(&data[1], 3, 6);
    let base = generate(&p, &req, &data[1].prompts).unwrap();
    let cfg = TrainConfig::default();
    p.denoiser.attach_lora(&mut p.params, cfg.lora_rank, cfg.effective_lora_scale(), cfg.lora_a_std, 1).unwrap();
    let adapted = generate(&p, &req, &data[1].prompts).unwrap();
    assert_eq!(adapted.metadata.adapter_count, 4 * p.denoiser.blocks().len());
    assert!(base.latent.max_abs_diff(&adapted.latent) < 1e-12);
}

#[test]
fn request_validation() {
    let (p, data) = pipeline_and_data(1);
    let mut req = request(&data[0], 0, 4);
    req.subjects[0].bbox = [0.5, 0.5, 0.4, 0.9];
    assert!(generate(&p, &req, &data[0].prompts).is_err());
    let req = request(&data[0], 0, 4);
    assert!(generate(&p, &req, &data[0].prompts[..1]).is_err());
    let mut three = req.clone();
    three.subjects.push(three.subjects[0].clone());
    assert!(three.validate().is_err());
    assert!(GenerationRequest { num_steps: 0, ..req.clone() }.validate().is_err());
    assert!(GenerationRequest { gamma: Some(1.5), ..req }.validate().is_err());
}

#[test]
fn timesteps_descend_to_zero() {
    assert_eq!(sampling_timesteps(1000, 1), vec![999]);
    let ts = sampling_timesteps(1000, 30);
    assert_eq!((ts.len(), ts[0], *ts.last().unwrap()), (30, 999, 0));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(sampling_timesteps(10, 50).len(), 10);
}

#[test]
fn grid_shapes_are_row_major_and_near_square() {
    assert_eq!(grid_shape(0), (0, 0));
    assert_eq!(grid_shape(1), (1, 1));
    assert_eq!(grid_shape(2), (1, 2));
    assert_eq!(grid_shape(4), (2, 2));
    assert_eq!(grid_shape(5), (2, 3));
    assert_eq!(grid_shape(9), (3, 3));
}

#[test]
fn grid_sidecar_round_trips_through_the_request_parser() {
    let (p, data) = pipeline_and_data(1);
    let reqs: Vec<_> = (0..4).map(|i| request(&data[i], i as u64, 3)).collect();
    let jobs: Vec<_> = reqs.iter().zip(&data).map(|(r, t)| (r.clone(), t.prompts.clone())).collect();
    let outs = generate_batch(&p, &jobs).unwrap();
    let seq: Vec<_> = jobs.iter().map(|(r, refs)| generate(&p, r, refs).unwrap()).collect();
    for (a, b) in outs.iter().zip(&seq) {
        assert_eq!(a.image, b.image);
    }

    let dir = tempfile::tempdir().unwrap();
    let (png, json) = grid_report(&reqs, &outs, dir.path(), "grid").unwrap();
    let side = Image::load(&png).unwrap();
    assert_eq!(side.width(), 2 * 128);
    let sidecar = GridSidecar::load(&json).unwrap();
    assert_eq!((sidecar.rows, sidecar.cols), (2, 2));
    assert_eq!(
        sidecar.cells.iter().map(|c| (c.row, c.col)).collect::<Vec<_>>(),
        vec![(0, 0), (0, 1), (1, 0), (1, 1)]
    );
    assert_eq!(sidecar.requests(), reqs);

    let replay = dir.path().join("replay.json");
    std::fs::write(&replay, serde_json::json!({ "requests": sidecar.requests() }).to_string()).unwrap();
    assert_eq!(RequestFile::load(&replay).unwrap(), reqs);

    let one = grid_report(&reqs[..1], &outs[..1], dir.path(), "one").unwrap().1;
    let s = GridSidecar::load(one).unwrap();
    assert_eq!((s.rows, s.cols), (1, 1));
}

#[test]
fn adapters_port_between_equal_configs() {
    let (mut a, data) = pipeline_and_data(1);
    let cfg = TrainConfig { steps: 5, batch_size: 2, ..Default::default() };
    let report = finetune(&mut a, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapters.rlta");
    report.adapters.to_archive().save(&path).unwrap();

    let config_b: ModelConfig = serde_json::from_str(&serde_json::to_string(&a.config).unwrap()).unwrap();
    let mut b = Pipeline::new(config_b).unwrap();
    b.attach_adapters(&AdapterSet::from_archive(&Archive::load(&path).unwrap()).unwrap()).unwrap();
    configure(&mut b, &cfg).unwrap();
    let req = request(&data[2], 9, 6);
    let out_a = generate(&a, &req, &data[2].prompts).unwrap();
    let out_b = generate(&b, &req, &data[2].prompts).unwrap();
    assert_eq!(out_a.latent, out_b.latent);
    assert_eq!(out_a.image, out_b.image);

    let mut other = ModelConfig::default();
    other.denoiser.seed = 99;
    let mut c = Pipeline::new(other).unwrap();
    c.attach_adapters(&report.adapters).unwrap();

    let mut narrow = ModelConfig::default();
    narrow.denoiser.width = 16;
    let mut d = Pipeline::new(narrow).unwrap();
    let err = d.attach_adapters(&report.adapters).unwrap_err();
    assert!(err.to_string().contains("16"), "{err}");
}
