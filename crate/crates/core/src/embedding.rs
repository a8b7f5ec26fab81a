//! Embedding backends used as distillation teachers and evaluation scorers.
//!
//! Real CLIP/DINO-style models are not shipped. The stub backends below are
//! deterministic functions of pixel statistics (and of a string hash for
//! text), which is enough to exercise every scoring path exactly. Precomputed
//! embeddings from an external model can be plugged in via
//! [`LookupBackend`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::params::hex;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    JointImageText,
    VisionOnly,
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> BackendKind;

    /// Unit-norm image embedding.
    fn image_embed(&self, img: &Image) -> Result<Vec<f64>>;

    /// Unit-norm text embedding; vision-only backends fail.
    fn text_embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

fn no_text(name: &str) -> Error {
    Error::Backend { backend: name.to_string(), reason: "vision-only backend has no text tower".into() }
}

/// Deterministic pseudo-random unit vector keyed by a string.
pub fn hashed_unit_vector(key: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(key.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    normalized(Mat::randn(1, dim, 1.0, &mut rng).into_vec())
}

fn luminance(c: Rgb) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Teacher stub: `[r̄, ḡ, b̄, 1, 0, …]` normalized, the mean colour of an
/// image padded with a constant so black patches keep a non-zero norm.
#[derive(Clone, Debug)]
pub struct MeanColorBackend {
    dim: usize,
}

impl MeanColorBackend {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 4, "mean-colour embeddings need at least 4 dims");
        Self { dim }
    }
}

impl EmbeddingBackend for MeanColorBackend {
    fn name(&self) -> &str {
        "stub-mean-color"
    }

    fn kind(&self) -> BackendKind {
        BackendKind::VisionOnly
    }

    fn image_embed(&self, img: &Image) -> Result<Vec<f64>> {
        let m = img.mean_color();
        let mut v = vec![0.0; self.dim];
        v[..3].copy_from_slice(&m);
        v[3] = 1.0;
        Ok(normalized(v))
    }

    fn text_embed(&self, _text: &str) -> Result<Vec<f64>> {
        Err(no_text(self.name()))
    }
}

const COLOR_NAMES: [(&str, Rgb); 10] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.6, 0.2, 0.8]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("pink", [0.95, 0.5, 0.7]),
];

pub fn named_color(name: &str) -> Option<Rgb> {
    let key = name.trim().to_ascii_lowercase();
    if let Some(hexcode) = key.strip_prefix('#') {
        if hexcode.len() == 6 {
            let ch = |i: usize| u8::from_str_radix(&hexcode[i..i + 2], 16).ok().map(|v| f64::from(v) / 255.0);
            return Some([ch(0)?, ch(2)?, ch(4)?]);
        }
        return None;
    }
    COLOR_NAMES.iter().find(|(n, _)| *n == key).map(|(_, c)| *c)
}

/// Joint image/text stub. Images map to a normalized vector of colour and
/// layout statistics; a colour name (or `#rrggbb`) maps to the embedding of
/// the solid image of that colour; any other text maps to a hashed vector.
#[derive(Clone, Debug, Default)]
pub struct StubJointBackend;

impl StubJointBackend {
    pub const DIM: usize = 8;

    fn features(img: &Image) -> Vec<f64> {
        let (w, h) = (img.width(), img.height());
        let m = img.mean_color();
        let (mut lum_sum, mut lum_sq, mut top, mut left) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let l = luminance(img.get(x, y));
                lum_sum += l;
                lum_sq += l * l;
                if y < h / 2 {
                    top += l;
                } else {
                    top -= l;
                }
                if x < w / 2 {
                    left += l;
                } else {
                    left -= l;
                }
            }
        }
        let n = (w * h) as f64;
        let mean = lum_sum / n;
        let std = (lum_sq / n - mean * mean).max(0.0).sqrt();
        normalized(vec![m[0], m[1], m[2], 0.5, std, top / n, left / n, 0.0])
    }
}

impl EmbeddingBackend for StubJointBackend {
    fn name(&self) -> &str {
        "stub-joint"
    }

    fn kind(&self) -> BackendKind {
        BackendKind::JointImageText
    }

    fn image_embed(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(Self::features(img))
    }

    fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(c) = named_color(text) {
            return Ok(Self::features(&Image::filled(8, 8, c)));
        }
        Ok(hashed_unit_vector(text, Self::DIM))
    }
}

/// Vision-only stub: quadrant mean colours plus a constant.
#[derive(Clone, Debug, Default)]
pub struct StubVisionBackend;

impl EmbeddingBackend for StubVisionBackend {
    fn name(&self) -> &str {
        "stub-vision"
    }

    fn kind(&self) -> BackendKind {
        BackendKind::VisionOnly
    }

    fn image_embed(&self, img: &Image) -> Result<Vec<f64>> {
        let (w, h) = (img.width(), img.height());
        let mut v = vec![0.0; 13];
        let mut counts = [0usize; 4];
        for y in 0..h {
            for x in 0..w {
                let q = usize::from(y * 2 >= h) * 2 + usize::from(x * 2 >= w);
                let c = img.get(x, y);
                for k in 0..3 {
                    v[q * 3 + k] += c[k];
                }
                counts[q] += 1;
            }
        }
        for q in 0..4 {
            for k in 0..3 {
                v[q * 3 + k] /= counts[q].max(1) as f64;
            }
        }
        v[12] = 0.5;
        Ok(normalized(v))
    }

    fn text_embed(&self, _text: &str) -> Result<Vec<f64>> {
        Err(no_text(self.name()))
    }
}

/// Content key used by [`LookupBackend`]: SHA-256 of the 8-bit RGB pixels
/// prefixed by the dimensions.
pub fn image_key(img: &Image) -> String {
    let mut h = Sha256::new();
    h.update((img.width() as u32).to_le_bytes());
    h.update((img.height() as u32).to_le_bytes());
    h.update(img.to_rgb8());
    hex(&h.finalize())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookupTable {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub images: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub texts: BTreeMap<String, Vec<f64>>,
}

/// Embeddings precomputed by an external model, keyed by [`image_key`] and by
/// exact text.
#[derive(Clone, Debug)]
pub struct LookupBackend {
    table: LookupTable,
}

impl LookupBackend {
    pub fn new(table: LookupTable) -> Self {
        Self { table }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(Self::new(table))
    }

    fn missing(&self, what: &str) -> Error {
        Error::Backend { backend: self.table.name.clone(), reason: format!("no embedding for {what}") }
    }
}

impl EmbeddingBackend for LookupBackend {
    fn name(&self) -> &str {
        &self.table.name
    }

    fn kind(&self) -> BackendKind {
        self.table.kind
    }

    fn image_embed(&self, img: &Image) -> Result<Vec<f64>> {
        let key = image_key(img);
        self.table.images.get(&key).cloned().map(normalized).ok_or_else(|| self.missing(&format!("image {key}")))
    }

    fn text_embed(&self, text: &str) -> Result<Vec<f64>> {
        if self.table.kind == BackendKind::VisionOnly {
            return Err(no_text(self.name()));
        }
        self.table.texts.get(text).cloned().map(normalized).ok_or_else(|| self.missing(&format!("text {text:?}")))
    }
}
