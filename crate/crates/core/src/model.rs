//! Toy text encoder and U-Net-like denoiser built around parallel
//! cross-attention layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionDims, ParallelCrossAttentionLayer, SlotName};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::embedding::hashed_unit_vector;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::local_encoder::pooling_matrix;
use crate::nn::{sinusoidal, Ffn, Linear, Norm};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Mat;

pub const NAMESPACE: &str = "denoiser";

/// Deterministic bag-of-words text encoder: one hashed vector per word plus
/// a sinusoidal position code. It has no parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoder {
    pub dim: usize,
    pub max_tokens: usize,
    /// Norm of each word vector.
    pub token_norm: f64,
}

impl Default for TextEncoder {
    fn default() -> Self {
        Self { dim: 16, max_tokens: 16, token_norm: 4.0 }
    }
}

impl TextEncoder {
    pub fn words(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric() && c != '-')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    /// `tokens × dim`; an empty prompt yields a single padding token.
    pub fn encode(&self, text: &str) -> Mat {
        let mut words = Self::words(text);
        words.truncate(self.max_tokens);
        if words.is_empty() {
            words.push("<pad>".into());
        }
        let rows: Vec<Vec<f64>> = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let pos = sinusoidal(i as f64, self.dim);
                hashed_unit_vector(&format!("word:{w}"), self.dim)
                    .iter()
                    .zip(pos.as_slice())
                    .map(|(v, p)| self.token_norm * v + 0.5 * p)
                    .collect()
            })
            .collect();
        Mat::from_rows(&rows).expect("rows share a width")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Side of the square latent grid.
    pub latent_size: usize,
    pub width: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub mlp_hidden: usize,
    pub gamma: f64,
    /// Gain on the `√(1−ᾱ_t)·z_t` path to the noise prediction.
    pub skip_gain: f64,
    pub schedule: ScheduleConfig,
    /// Seeds the frozen base weights; equal configs build equal models.
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            width: 32,
            text_dim: 16,
            image_dim: 16,
            heads: 2,
            time_dim: 16,
            mlp_hidden: 64,
            gamma: 0.6,
            skip_gain: 1.0,
            schedule: ScheduleConfig::default(),
            seed: 7,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size % 2 != 0 || self.latent_size == 0 {
            return Err(Error::Config(format!("latent_size {} must be even", self.latent_size)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config("width must be divisible by heads".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        NoiseSchedule::new(self.schedule).map(|_| ())
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            model: self.width,
            image: self.image_dim,
            text: self.text_dim,
            heads: self.heads,
            head_dim: self.width / self.heads,
        }
    }

    /// Digest of the architecture-relevant fields.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::params::hex(&Sha256::digest(json))
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserBlock {
    norm1: Norm,
    pub attn: ParallelCrossAttentionLayer,
    norm2: Norm,
    ffn: Ffn,
}

impl DenoiserBlock {
    fn forward(&self, g: &Graph, h: Var, ci: Var, ct: Var, gamma: f64) -> Result<Var> {
        let a = self.attn.forward_with_gamma(g, self.norm1.forward(g, h), ci, ct, gamma)?;
        let h = g.add(h, a);
        Ok(g.add(h, self.ffn.forward(g, self.norm2.forward(g, h))))
    }
}

/// Three-resolution denoiser: a full-resolution block, a 2×2-pooled
/// bottleneck block, and an upsampled block with a skip connection. Each
/// block holds one parallel cross-attention layer. All base weights are
/// frozen.
///
/// The network output `F` is preconditioned as
/// `ε̂ = skip_gain·√(1−ᾱ_t)·z_t + √ᾱ_t·F`. The first term is the noise
/// estimate for unit-variance latents; scaling `F` by `√ᾱ_t` keeps the error
/// of the recovered `ẑ₀` bounded as `ᾱ_t → 0`.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub config: DenoiserConfig,
    schedule: NoiseSchedule,
    in_proj: Linear,
    positions: ParamId,
    time1: Linear,
    time2: Linear,
    blocks: Vec<DenoiserBlock>,
    out_norm: Norm,
    out_proj: Linear,
    pool: Mat,
    upsample: Mat,
}

impl ToyDenoiser {
    pub fn new(params: &mut ParamSet, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(config.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let d = config.width;
        let n = config.latent_size * config.latent_size;
        let in_proj = Linear::new(params, &format!("{NAMESPACE}/in_proj"), config.latent_channels, d, true, false, rng);
        let positions = params.add(format!("{NAMESPACE}/positions"), Mat::randn(n, d, 0.1, rng), false);
        let time1 = Linear::new(params, &format!("{NAMESPACE}/time1"), config.time_dim, d, true, false, rng);
        let time2 = Linear::new(params, &format!("{NAMESPACE}/time2"), d, d, true, false, rng);
        let blocks = ["down", "mid", "up"]
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let prefix = format!("{NAMESPACE}/{name}");
                Ok(DenoiserBlock {
                    norm1: Norm::layer_norm(params, &format!("{prefix}/norm1"), d, false),
                    attn: ParallelCrossAttentionLayer::new(
                        params,
                        &format!("{prefix}/attn"),
                        i,
                        config.attention_dims(),
                        config.gamma,
                        rng,
                    )?,
                    norm2: Norm::layer_norm(params, &format!("{prefix}/norm2"), d, false),
                    ffn: Ffn::new(params, &format!("{prefix}/ffn"), d, config.mlp_hidden, false, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_norm = Norm::layer_norm(params, &format!("{NAMESPACE}/out_norm"), d, false);
        let out_proj = Linear::new(params, &format!("{NAMESPACE}/out_proj"), d, config.latent_channels, true, false, rng);
        let side = config.latent_size;
        let pool = pooling_matrix(side, side, side / 2)?;
        let upsample = nearest_upsample(side / 2, side);
        Ok(Self { config, schedule, in_proj, positions, time1, time2, blocks, out_norm, out_proj, pool, upsample })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn blocks(&self) -> &[DenoiserBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [DenoiserBlock] {
        &mut self.blocks
    }

    pub fn attention_layers(&self) -> impl Iterator<Item = &ParallelCrossAttentionLayer> {
        self.blocks.iter().map(|b| &b.attn)
    }

    /// Attaches fresh adapters to every adaptable slot of every layer.
    pub fn attach_lora(
        &mut self,
        params: &mut ParamSet,
        rank: usize,
        scale: f64,
        a_std: f64,
        seed: u64,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            for slot in SlotName::ADAPTABLE {
                block.attn.attach_lora(params, slot, rank, scale, a_std, &mut rng)?;
            }
        }
        Ok(())
    }

    /// Ids of every adapter matrix.
    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.attention_layers().flat_map(|l| l.adapters().iter().flat_map(|a| [a.a, a.b])).collect()
    }

    fn time_embedding(&self, g: &Graph, t: usize) -> Var {
        let e = g.constant(sinusoidal(t as f64, self.config.time_dim));
        let h = g.silu(self.time1.forward(g, e));
        self.time2.forward(g, h)
    }

    /// Predicted noise `ε̂(z_t, t, c_i, c_t)` for latent tokens `zt`
    /// (`size² × channels`).
    pub fn forward(&self, g: &Graph, zt: Var, t: usize, ci: Var, ct: Var) -> Result<Var> {
        self.forward_with_gamma(g, zt, t, ci, ct, self.config.gamma)
    }

    pub fn forward_with_gamma(&self, g: &Graph, zt: Var, t: usize, ci: Var, ct: Var, gamma: f64) -> Result<Var> {
        let n = self.config.latent_size * self.config.latent_size;
        if g.shape(zt) != (n, self.config.latent_channels) {
            return Err(Error::shape(format!(
                "latent tokens {:?}, expected ({n}, {})",
                g.shape(zt),
                self.config.latent_channels
            )));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let h = self.in_proj.forward(g, zt);
        let h = g.add(h, g.param(self.positions));
        let h = g.add_row(h, self.time_embedding(g, t));
        let h1 = self.blocks[0].forward(g, h, ci, ct, gamma)?;
        let m = g.matmul(g.constant(self.pool.clone()), h1);
        let m = self.blocks[1].forward(g, m, ci, ct, gamma)?;
        let u = g.add(g.matmul(g.constant(self.upsample.clone()), m), h1);
        let u = self.blocks[2].forward(g, u, ci, ct, gamma)?;
        let out = self.out_proj.forward(g, self.out_norm.forward(g, u));
        Ok(g.add(g.scale(out, ab.sqrt()), g.scale(zt, self.config.skip_gain * (1.0 - ab).sqrt())))
    }
}

/// `(side²) × (half²)` nearest-neighbour upsampling matrix.
fn nearest_upsample(half: usize, side: usize) -> Mat {
    let mut m = Mat::zeros(side * side, half * half);
    let f = side / half;
    for y in 0..side {
        for x in 0..side {
            m.set(y * side + x, (y / f) * half + x / f, 1.0);
        }
    }
    m
}
