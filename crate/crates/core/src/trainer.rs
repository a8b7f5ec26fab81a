//! Adapter fine-tuning on relation triplets with the combined objective
//! `L = L_denoise + λ·L_KML`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::AdapterSet;
use crate::data::{Keypoint, Triplet};
use crate::diffusion::{forward_noise_at, predict_z0_var};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::id_extractor::GroundedQuery;
use crate::image::Image;
use crate::local_encoder::TokenBundle;
use crate::optim::{batch_gradients, Adam, BatchGrads};
use crate::pipeline::Pipeline;
use crate::tensor::Mat;

/// Maps pixel keypoints onto a latent grid by floor division, clamping to
/// the grid. Keypoints with `v == 0` map to `None`.
pub fn keypoint_to_latent(kps: &[Keypoint], factor: usize, grid_w: usize, grid_h: usize) -> Vec<Option<[usize; 2]>> {
    let f = factor.max(1) as f64;
    let cell = |c: f64, n: usize| ((c.max(0.0) / f).floor() as usize).min(n.saturating_sub(1));
    kps.iter()
        .map(|k| (k.v > 0).then(|| [cell(k.x, grid_w), cell(k.y, grid_h)]))
        .collect()
}

/// Matched latent rows `(row in ẑ₀, row in E(c_i))`, dropping pairs where
/// either side is excluded.
pub fn kml_pairs(kp_z0: &[Option<[usize; 2]>], kp_ci: &[Option<[usize; 2]>], grid_w: usize) -> Result<Vec<(usize, usize)>> {
    if kp_z0.len() != kp_ci.len() {
        return Err(Error::invalid(format!("{} target keypoints vs {} prompt keypoints", kp_z0.len(), kp_ci.len())));
    }
    Ok(kp_z0
        .iter()
        .zip(kp_ci)
        .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
        .map(|(a, b)| (a[1] * grid_w + a[0], b[1] * grid_w + b[0]))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KmlValue {
    pub loss: f64,
    pub visible: usize,
    /// Set when no pair was visible and the loss was defined as zero.
    pub warning: bool,
}

/// Mean over matched pairs of `‖E(c_i)[kp_ci] − ẑ₀[kp_z0]‖²`. Both grids are
/// `positions × channels` token matrices.
pub fn kml_loss(z0_hat: &Mat, enc_ci: &Mat, pairs: &[(usize, usize)]) -> Result<KmlValue> {
    if z0_hat.cols() != enc_ci.cols() {
        return Err(Error::shape(format!("{} vs {} latent channels", z0_hat.cols(), enc_ci.cols())));
    }
    if pairs.is_empty() {
        return Ok(KmlValue { loss: 0.0, visible: 0, warning: true });
    }
    let mut sum = 0.0;
    for &(r0, rc) in pairs {
        if r0 >= z0_hat.rows() || rc >= enc_ci.rows() {
            return Err(Error::invalid(format!("keypoint rows ({r0}, {rc}) outside the latent grids")));
        }
        sum += z0_hat.row(r0).iter().zip(enc_ci.row(rc)).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
    }
    Ok(KmlValue { loss: sum / pairs.len() as f64, visible: pairs.len(), warning: false })
}

/// Graph form of [`kml_loss`] with the prompt side already gathered into
/// `target` (one row per pair).
pub fn kml_var(g: &Graph, z0_hat: Var, rows: &[usize], target: &Mat) -> Var {
    let picked = g.gather_rows(z0_hat, rows);
    let d = g.sub(picked, g.constant(target.clone()));
    g.scale(g.sum(g.mul(d, d)), 1.0 / rows.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Blank image prompts; relation inversion from the text branch alone.
    BlankImagePrompt,
    NoKml,
    NoLocalTokens,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Full, Self::BlankImagePrompt, Self::NoKml, Self::NoLocalTokens];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::BlankImagePrompt => "blank_image_prompt",
            Self::NoKml => "no_kml",
            Self::NoLocalTokens => "no_local_tokens",
        }
    }

    pub fn uses_kml(self) -> bool {
        matches!(self, Self::Full | Self::NoLocalTokens)
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lora_rank: usize,
    pub gamma: f64,
    pub lambda_kml: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    /// Also train the identity extractor's gates.
    pub train_extractor_gates: bool,
    /// Adapter output scale; `None` means `1/r`.
    pub lora_scale: Option<f64>,
    pub lora_a_std: f64,
    /// Abort when the batch loss exceeds this.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lora_rank: 4,
            gamma: 0.6,
            lambda_kml: 1e-3,
            steps: 500,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            ablation_mode: AblationMode::Full,
            train_extractor_gates: false,
            lora_scale: None,
            lora_a_std: 4.0,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kml >= 0.0 && self.lambda_kml.is_finite()) {
            return Err(Error::Config(format!("lambda_kml must be ≥ 0, got {}", self.lambda_kml)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.lora_rank == 0 {
            return Err(Error::Config("steps, batch_size and lora_rank must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    pub fn effective_lora_scale(&self) -> f64 {
        self.lora_scale.unwrap_or(1.0 / self.lora_rank as f64)
    }

    /// λ as applied, zero in modes without keypoint matching.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation_mode.uses_kml() {
            self.lambda_kml
        } else {
            0.0
        }
    }
}

/// Image condition of a prepared triplet.
#[derive(Clone, Debug)]
pub enum Condition {
    Fixed(Mat),
    /// Recomputed on every graph so extractor gates receive gradients.
    Live { bundles: Vec<TokenBundle>, queries: Vec<GroundedQuery> },
}

/// A triplet reduced to what the loss needs.
#[derive(Clone, Debug)]
pub struct PreparedTriplet {
    pub z0: Mat,
    pub ct: Mat,
    pub ci: Condition,
    /// Rows of ẑ₀ matched to the rows of `kml_target`.
    pub kml_rows: Vec<usize>,
    pub kml_target: Mat,
}

fn fitted_keypoints(kps: &[Keypoint], img: &Image, size: usize) -> Vec<Keypoint> {
    let (sx, sy) = (size as f64 / img.width() as f64, size as f64 / img.height() as f64);
    kps.iter().map(|k| Keypoint { x: k.x * sx, y: k.y * sy, v: k.v }).collect()
}

pub fn prepare(pipeline: &Pipeline, triplets: &[Triplet], cfg: &TrainConfig) -> Result<Vec<PreparedTriplet>> {
    let size = pipeline.config.image_size;
    let factor = pipeline.config.downscale_factor;
    let side = pipeline.config.denoiser.latent_size;
    triplets
        .iter()
        .map(|t| {
            t.validate()?;
            let prompts: Vec<Image> = if cfg.ablation_mode == AblationMode::BlankImagePrompt {
                t.prompts.iter().map(|_| Image::filled(size, size, [1.0; 3])).collect()
            } else {
                t.prompts.iter().map(|p| pipeline.fit(p)).collect()
            };
            let (bundles, queries) = pipeline.subject_inputs(&prompts, &t.classes, &t.boxes)?;
            let ci = if cfg.train_extractor_gates {
                Condition::Live { bundles, queries }
            } else {
                let g = Graph::new(&pipeline.params);
                Condition::Fixed(g.value(pipeline.identity_condition_var(&g, &bundles, &queries)?))
            };
            let mut kml_rows = Vec::new();
            let mut targets = Vec::new();
            if cfg.effective_lambda() > 0.0 {
                for (k, prompt) in t.prompts.iter().enumerate() {
                    let enc = pipeline.encode_latent(prompt)?;
                    let kz = keypoint_to_latent(&fitted_keypoints(&t.keypoints_x[k], &t.target, size), factor, side, side);
                    let kc = keypoint_to_latent(&fitted_keypoints(&t.keypoints_ci[k], prompt, size), factor, side, side);
                    for (r0, rc) in kml_pairs(&kz, &kc, side)? {
                        kml_rows.push(r0);
                        targets.push(enc.row(rc).to_vec());
                    }
                }
            }
            let kml_target =
                if targets.is_empty() { Mat::zeros(0, pipeline.codec.channels()) } else { Mat::from_rows(&targets)? };
            Ok(PreparedTriplet {
                z0: pipeline.encode_latent(&t.target)?,
                ct: pipeline.text_tokens(&t.text),
                ci,
                kml_rows,
                kml_target,
            })
        })
        .collect()
}

/// One Monte Carlo draw of the objective.
#[derive(Clone, Debug)]
pub struct Sample {
    pub item: usize,
    pub t: usize,
    pub eps: Mat,
}

/// Draws a batch with stratified timesteps: sample `k` of `B` takes
/// `t = ⌊(k + u)·T / B⌋` with `u ~ U[0, 1)`, so each `t` is still uniform on
/// `[0, T)` while the batch covers the whole range.
pub fn draw_batch<R: Rng + ?Sized>(rng: &mut R, pipeline: &Pipeline, num_items: usize, batch: usize) -> Vec<Sample> {
    let (n, c) = (pipeline.config.denoiser.latent_size.pow(2), pipeline.codec.channels());
    let steps = pipeline.schedule.len();
    (0..batch)
        .map(|k| {
            let item = rng.random_range(0..num_items);
            let u: f64 = rng.random();
            let t = (((k as f64 + u) * steps as f64 / batch as f64) as usize).min(steps - 1);
            Sample { item, t, eps: Mat::randn(n, c, 1.0, rng) }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub denoise: f64,
    pub kml: f64,
    pub total: f64,
    /// No keypoint pair was visible although KML was active.
    #[serde(skip)]
    pub kml_warning: bool,
}

/// Builds the loss of one sample on `g`.
pub fn sample_loss(
    g: &Graph,
    pipeline: &Pipeline,
    item: &PreparedTriplet,
    sample: &Sample,
    lambda: f64,
) -> Result<(Var, LossParts)> {
    let ab = pipeline.schedule.alpha_bar(sample.t)?;
    let zt = g.constant(forward_noise_at(&item.z0, &sample.eps, ab)?);
    let ci = match &item.ci {
        Condition::Fixed(m) => g.constant(m.clone()),
        Condition::Live { bundles, queries } => pipeline.identity_condition_var(g, bundles, queries)?,
    };
    let eps_hat = pipeline.denoiser.forward(g, zt, sample.t, ci, g.constant(item.ct.clone()))?;
    let denoise = g.mse(eps_hat, g.constant(sample.eps.clone()));
    let mut parts = LossParts { denoise: g.scalar(denoise), ..Default::default() };
    if lambda == 0.0 {
        parts.total = parts.denoise;
        return Ok((denoise, parts));
    }
    if item.kml_rows.is_empty() {
        parts.kml_warning = true;
        parts.total = parts.denoise;
        return Ok((denoise, parts));
    }
    let z0_hat = predict_z0_var(g, zt, eps_hat, ab);
    let kml = kml_var(g, z0_hat, &item.kml_rows, &item.kml_target);
    let total = g.add(denoise, g.scale(kml, lambda));
    parts.kml = g.scalar(kml);
    parts.total = g.scalar(total);
    Ok((total, parts))
}

/// Batch-mean loss and averaged gradients over the trainable parameters.
pub fn total_loss(
    pipeline: &Pipeline,
    items: &[PreparedTriplet],
    batch: &[Sample],
    lambda: f64,
) -> Result<BatchGrads<LossParts>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    batch_gradients(&pipeline.params, batch, |g, s| sample_loss(g, pipeline, &items[s.item], s, lambda))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub denoise: f64,
    pub kml: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub adapters: AdapterSet,
    pub log: Vec<StepLog>,
    pub frozen_checksum: String,
    /// Samples where KML was active but no keypoint pair was visible.
    pub kml_warnings: usize,
}

impl TrainReport {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        write_log(path, &self.log)
    }
}

/// One JSON object per line.
pub fn write_log(path: impl AsRef<Path>, log: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for entry in log {
        let line = serde_json::to_string(entry).map_err(|e| Error::json(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepLog>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Mean of `total` over the `window` steps ending at `end` (exclusive).
pub fn trailing_mean(log: &[StepLog], end: usize, window: usize) -> f64 {
    let end = end.min(log.len());
    let start = end.saturating_sub(window);
    let s = &log[start..end];
    s.iter().map(|e| e.total).sum::<f64>() / s.len().max(1) as f64
}

/// Applies the inference-time settings of a run: the attention γ and the
/// local-token switch. Generation with trained adapters needs the same.
pub fn configure(pipeline: &mut Pipeline, cfg: &TrainConfig) -> Result<()> {
    for block in pipeline.denoiser.blocks_mut() {
        block.attn.set_gamma(cfg.gamma)?;
    }
    pipeline.denoiser.config.gamma = cfg.gamma;
    pipeline.extractor.config.no_local_tokens = cfg.ablation_mode == AblationMode::NoLocalTokens;
    Ok(())
}

pub const MIN_TRIPLETS: usize = 4;

/// Attaches fresh adapters to the pipeline's denoiser and trains them.
/// Everything else stays bit-for-bit unchanged.
pub fn finetune(pipeline: &mut Pipeline, triplets: &[Triplet], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if triplets.len() < MIN_TRIPLETS {
        return Err(Error::invalid(format!("need at least {MIN_TRIPLETS} triplets, got {}", triplets.len())));
    }
    if pipeline.denoiser.attention_layers().any(|l| !l.adapters().is_empty()) {
        return Err(Error::Config("denoiser already carries adapters".into()));
    }
    configure(pipeline, cfg)?;
    pipeline.denoiser.attach_lora(
        &mut pipeline.params,
        cfg.lora_rank,
        cfg.effective_lora_scale(),
        cfg.lora_a_std,
        cfg.seed ^ 0x5eed_1a7e,
    )?;
    let mut expected = pipeline.denoiser.adapter_ids();
    for id in pipeline.extractor.gate_ids() {
        pipeline.params.set_trainable(id, cfg.train_extractor_gates);
    }
    if cfg.train_extractor_gates {
        expected.extend(pipeline.extractor.gate_ids());
    }
    expected.sort();
    if pipeline.params.trainable_ids() != expected {
        return Err(Error::Config("trainable set differs from the adapters and configured gates".into()));
    }
    let checksum = pipeline.params.frozen_checksum();

    let items = prepare(pipeline, triplets, cfg)?;
    let lambda = cfg.effective_lambda();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut kml_warnings = 0;
    for step in 1..=cfg.steps {
        let batch = draw_batch(&mut rng, pipeline, items.len(), cfg.batch_size);
        let bg = total_loss(pipeline, &items, &batch, lambda)?;
        let n = bg.aux.len() as f64;
        let mean = |f: fn(&LossParts) -> f64| bg.aux.iter().map(f).sum::<f64>() / n;
        let entry = StepLog { step, denoise: mean(|p| p.denoise), kml: mean(|p| p.kml), total: mean(|p| p.total) };
        kml_warnings += bg.aux.iter().filter(|p| p.kml_warning).count();
        if !entry.total.is_finite() || entry.total > cfg.divergence_threshold {
            let ts: Vec<usize> = batch.iter().map(|s| s.t).collect();
            return Err(Error::Diverged {
                step,
                reason: format!(
                    "total {} (denoise {}, kml {}) at timesteps {ts:?}, grad norm {}",
                    entry.total,
                    entry.denoise,
                    entry.kml,
                    bg.grad_norm()
                ),
            });
        }
        log::debug!("step {step}: total {:.6} denoise {:.6} kml {:.6}", entry.total, entry.denoise, entry.kml);
        log.push(entry);
        adam.step(&mut pipeline.params, &bg.grads);
    }
    if kml_warnings > 0 {
        log::warn!("{kml_warnings} samples had no visible keypoint pair; their KML term was zero");
    }
    let after = pipeline.params.frozen_checksum();
    if after != checksum {
        return Err(Error::Config("frozen parameters changed during fine-tuning".into()));
    }
    Ok(TrainReport {
        adapters: AdapterSet::from_denoiser(&pipeline.params, &pipeline.denoiser),
        log,
        frozen_checksum: checksum,
        kml_warnings,
    })
}
