#![allow(dead_code)]

use relgen_core::tensor::Mat;

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn central_diff(x: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let mut up = x.clone();
            up.set(r, c, x.get(r, c) + h);
            let mut down = x.clone();
            down.set(r, c, x.get(r, c) - h);
            out.set(r, c, (f(&up) - f(&down)) / (2.0 * h));
        }
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        a.sub(b).norm() / scale
    }
}

use relgen_core::data::{packaged_relation_set, Triplet};
use relgen_core::pipeline::{ModelConfig, Pipeline};
use relgen_core::trainer::TrainConfig;

/// Default pipeline and a small slice of the packaged synthetic set.
pub fn pipeline_and_data(per_relation: usize) -> (Pipeline, Vec<Triplet>) {
    (Pipeline::new(ModelConfig::default()).unwrap(), packaged_relation_set(per_relation, 0))
}

/// Attaches adapters as fine-tuning would, with `B` randomised so the
/// adapted path is not the identity.
pub fn attach_random_adapters(p: &mut Pipeline, cfg: &TrainConfig, b_std: f64) {
    use rand::SeedableRng;
    p.denoiser
        .attach_lora(&mut p.params, cfg.lora_rank, cfg.effective_lora_scale(), cfg.lora_a_std, cfg.seed)
        .unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    for layer in p.denoiser.attention_layers() {
        for ad in layer.adapters() {
            let (r, c) = p.params.value(ad.b).shape();
            p.params.set_value(ad.b, Mat::randn(r, c, b_std, &mut rng));
        }
    }
}
