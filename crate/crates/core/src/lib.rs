//! Relation-aware customized image generation at desk scale.
//!
//! The crate exercises the mechanisms of relation-aware subject customization
//! on small, fully inspectable models: a parallel image/text cross-attention
//! with LoRA adapters on the text branch, a keypoint matching loss on the
//! predicted clean latent, local tokens distilled from dense features, an
//! identity extractor built from gated self-attention, a triplet fine-tuning
//! loop, inference, and the CLIP-T / CLIP-R / CLIP-I / DINO evaluation
//! harness.

pub mod archive;
pub mod config;
pub mod attention;
pub mod data;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod graph;
pub mod id_extractor;
pub mod image;
pub mod local_encoder;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
