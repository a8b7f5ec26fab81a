//! The assembled model: codec, schedule, text encoder, local encoder,
//! identity extractor and denoiser sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{AdapterSet, Archive};
use crate::diffusion::{NoiseSchedule, ToyCodec};
use crate::embedding::{EmbeddingBackend, StubJointBackend};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::id_extractor::{ExtractorConfig, GroundedQuery, IdExtractor};
use crate::image::Image;
use crate::local_encoder::{self, LocalEncoder, LocalEncoderConfig, TokenBundle};
use crate::model::{DenoiserConfig, TextEncoder, ToyDenoiser};
use crate::parallel;
use crate::params::ParamSet;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub downscale_factor: usize,
    pub text: TextEncoder,
    pub encoder: LocalEncoderConfig,
    pub extractor: ExtractorConfig,
    pub denoiser: DenoiserConfig,
    /// Value of every extractor gate scalar in the assembled model. The
    /// blocks start closed; an open gate stands in for a pretrained
    /// resampler whose identity tokens depend on the reference image.
    pub extractor_gate: f64,
    /// Seeds the local encoder and extractor initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            downscale_factor: 8,
            text: TextEncoder::default(),
            encoder: LocalEncoderConfig::default(),
            extractor: ExtractorConfig::default(),
            denoiser: DenoiserConfig::default(),
            extractor_gate: 1.0,
            seed: 11,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.encoder.out_dim == self.extractor.dim, "encoder.out_dim must equal extractor.dim"),
            (self.extractor.dim == self.denoiser.image_dim, "extractor.dim must equal denoiser.image_dim"),
            (self.text.dim == self.denoiser.text_dim, "text.dim must equal denoiser.text_dim"),
            (self.extractor.class_dim == StubJointBackend::DIM, "extractor.class_dim must match the class-text backend"),
            (
                self.downscale_factor > 0 && self.image_size == self.denoiser.latent_size * self.downscale_factor,
                "image_size must equal denoiser.latent_size × downscale_factor",
            ),
            (self.denoiser.latent_channels == 4, "the toy codec has 4 channels"),
            (self.extractor_gate.is_finite(), "extractor_gate must be finite"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        self.encoder.validate()?;
        self.denoiser.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: LocalEncoder,
    pub extractor: IdExtractor,
    pub denoiser: ToyDenoiser,
    pub codec: ToyCodec,
    pub schedule: NoiseSchedule,
    class_backend: StubJointBackend,
}

impl Pipeline {
    /// Builds every component from its seed. Encoder weights are frozen
    /// here; distillation trains them separately.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = LocalEncoder::new(&mut params, config.encoder.clone(), &mut rng)?;
        for id in LocalEncoder::param_ids(&params) {
            params.set_trainable(id, false);
        }
        let extractor = IdExtractor::new(&mut params, config.extractor.clone(), &mut rng)?;
        extractor.set_gates(&mut params, config.extractor_gate);
        let denoiser = ToyDenoiser::new(&mut params, config.denoiser.clone())?;
        let schedule = denoiser.schedule().clone();
        Ok(Self {
            codec: ToyCodec::new(config.downscale_factor),
            schedule,
            encoder,
            extractor,
            denoiser,
            params,
            config,
            class_backend: StubJointBackend,
        })
    }

    /// Loads distilled encoder weights (entries under `local_encoder/`).
    pub fn load_encoder(&mut self, archive: &Archive) -> Result<usize> {
        archive.load_into(&mut self.params, &format!("{}/", local_encoder::NAMESPACE))
    }

    pub fn attach_adapters(&mut self, set: &AdapterSet) -> Result<()> {
        set.attach(&mut self.params, &mut self.denoiser)
    }

    pub fn text_tokens(&self, text: &str) -> Mat {
        self.config.text.encode(text)
    }

    pub fn class_embedding(&self, noun: &str) -> Result<Vec<f64>> {
        self.class_backend.text_embed(noun)
    }

    pub fn fit(&self, img: &Image) -> Image {
        img.resized(self.config.image_size, self.config.image_size)
    }

    /// Latent tokens of an image after resizing to the model resolution.
    pub fn encode_latent(&self, img: &Image) -> Result<Mat> {
        Ok(self.codec.encode(&self.fit(img))?.into_tokens())
    }

    /// Encoder tokens after resizing to the encoder resolution.
    pub fn token_bundle(&self, img: &Image) -> Result<TokenBundle> {
        let size = self.config.encoder.image_size;
        self.encoder.encode(&self.params, &img.resized(size, size))
    }

    pub fn query(&self, class_noun: &str, bbox: [f64; 4]) -> Result<GroundedQuery> {
        self.extractor.build_query(&self.params, &self.class_embedding(class_noun)?, bbox)
    }

    /// Identity tokens of all subjects stacked into the image condition
    /// `c_i`.
    pub fn identity_condition(&self, images: &[Image], classes: &[String], boxes: &[[f64; 4]]) -> Result<Mat> {
        let (bundles, queries) = self.subject_inputs(images, classes, boxes)?;
        let idx: Vec<usize> = (0..bundles.len()).collect();
        let tokens = parallel::try_map(&idx, |&k| {
            self.extractor.extract_identity(&self.params, &bundles[k], &queries[k], k).map(|t| t.tokens)
        })?;
        Mat::concat_rows(&tokens.iter().collect::<Vec<_>>())
    }

    /// Encoder tokens and grounded queries per subject.
    pub fn subject_inputs(
        &self,
        images: &[Image],
        classes: &[String],
        boxes: &[[f64; 4]],
    ) -> Result<(Vec<TokenBundle>, Vec<GroundedQuery>)> {
        if images.is_empty() || images.len() != classes.len() || images.len() != boxes.len() {
            return Err(Error::invalid(format!(
                "{} images, {} classes, {} boxes",
                images.len(),
                classes.len(),
                boxes.len()
            )));
        }
        let bundles = parallel::try_map(images, |img| self.token_bundle(img))?;
        let queries = classes.iter().zip(boxes).map(|(c, b)| self.query(c, *b)).collect::<Result<Vec<_>>>()?;
        Ok((bundles, queries))
    }

    /// Image condition on the graph, so extractor gates can receive
    /// gradients.
    pub fn identity_condition_var(&self, g: &Graph, bundles: &[TokenBundle], queries: &[GroundedQuery]) -> Result<Var> {
        let parts = bundles
            .iter()
            .zip(queries)
            .map(|(b, q)| {
                let ti = g.constant(b.tok_i.clone());
                let tl = g.constant(b.tok_l.clone());
                self.extractor.forward_var(g, &q.q, ti, tl)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) })
    }
}
