//! Identity extractor: grounded queries from a class embedding and a box,
//! refined by gated self-attention over image-level and local tokens.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::GatedSelfAttentionBlock;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::local_encoder::TokenBundle;
use crate::nn::Linear;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Mat;

pub const NAMESPACE: &str = "id_extractor";

/// How local tokens are combined with the image-level tokens before the
/// gated self-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMethod {
    /// `[q, tok_i, tok_l]`.
    #[default]
    Concatenate,
    /// `[q, tok_l + tok_i]`, the image-level token added to every local token.
    Add,
    /// `[q, W_fuse·[tok_i ‖ tok_l_j]]` per local token.
    LinearProjection,
}

impl InjectionMethod {
    pub const ALL: [InjectionMethod; 3] = [Self::Add, Self::LinearProjection, Self::Concatenate];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Concatenate => "concatenate",
            Self::Add => "add",
            Self::LinearProjection => "linear-projection",
        }
    }
}

impl fmt::Display for InjectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown injection method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Width of queries and identity tokens; must equal the token width.
    pub dim: usize,
    pub class_dim: usize,
    pub num_queries: usize,
    pub depth: usize,
    pub heads: usize,
    pub fourier_freqs: usize,
    pub injection: InjectionMethod,
    /// Drop `tok_l` entirely.
    pub no_local_tokens: bool,
    pub train_gates: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            class_dim: 8,
            num_queries: 4,
            depth: 2,
            heads: 2,
            fourier_freqs: 4,
            injection: InjectionMethod::Concatenate,
            no_local_tokens: false,
            train_gates: false,
        }
    }
}

impl ExtractorConfig {
    pub fn box_features(&self) -> usize {
        8 * self.fourier_freqs
    }
}

/// Sin/cos features of the four box coordinates at frequencies `2^k·π`.
pub fn fourier_box(bbox: [f64; 4], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(8 * freqs);
    for c in bbox {
        for k in 0..freqs {
            let w = PI * f64::from(1u32 << k);
            out.push((w * c).sin());
            out.push((w * c).cos());
        }
    }
    out
}

pub fn validate_box(b: [f64; 4]) -> Result<()> {
    if b.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("box {b:?} outside [0, 1]")));
    }
    if b[0] >= b[2] || b[1] >= b[3] {
        return Err(Error::invalid(format!("degenerate box {b:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedQuery {
    pub class_embedding: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// `1 × dim`.
    pub q: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTokens {
    /// `num_queries × dim`.
    pub tokens: Mat,
    pub object_index: usize,
}

#[derive(Clone, Debug)]
pub struct IdExtractor {
    pub config: ExtractorConfig,
    query_proj: Linear,
    query_offsets: ParamId,
    blocks: Vec<GatedSelfAttentionBlock>,
    fuse: Linear,
}

impl IdExtractor {
    /// All projections are frozen; gates start at zero and train only when
    /// `config.train_gates` is set.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        if config.num_queries == 0 || config.depth == 0 {
            return Err(Error::Config("extractor needs at least one query and one block".into()));
        }
        let d = config.dim;
        let query_proj = Linear::new(
            params,
            &format!("{NAMESPACE}/query_proj"),
            config.box_features() + config.class_dim,
            d,
            false,
            false,
            rng,
        );
        let query_offsets = params.add(
            format!("{NAMESPACE}/query_offsets"),
            Mat::randn(config.num_queries, d, 0.1, rng),
            false,
        );
        let blocks = (0..config.depth)
            .map(|k| {
                GatedSelfAttentionBlock::new(params, &format!("{NAMESPACE}/block{k}"), d, config.heads, config.train_gates, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = Linear::new(params, &format!("{NAMESPACE}/fuse"), 2 * d, d, false, false, rng);
        Ok(Self { config, query_proj, query_offsets, blocks, fuse })
    }

    pub fn blocks(&self) -> &[GatedSelfAttentionBlock] {
        &self.blocks
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.gate).collect()
    }

    /// Sets every gate scalar to `value`.
    pub fn set_gates(&self, params: &mut ParamSet, value: f64) {
        for id in self.gate_ids() {
            params.set_value(id, Mat::scalar(value));
        }
    }

    pub fn query_projection(&self) -> ParamId {
        self.query_proj.weight
    }

    pub fn build_query(&self, params: &ParamSet, class_embedding: &[f64], bbox: [f64; 4]) -> Result<GroundedQuery> {
        validate_box(bbox)?;
        if class_embedding.len() != self.config.class_dim {
            return Err(Error::shape(format!(
                "class embedding has {} dims, expected {}",
                class_embedding.len(),
                self.config.class_dim
            )));
        }
        let mut features = fourier_box(bbox, self.config.fourier_freqs);
        features.extend_from_slice(class_embedding);
        let q = Mat::row_vector(&features).matmul_t(params.value(self.query_proj.weight));
        Ok(GroundedQuery { class_embedding: class_embedding.to_vec(), bbox, q })
    }

    /// Condition tokens after applying the injection method; `None` for the
    /// local part when local tokens are disabled.
    fn conditions(&self, g: &Graph, tok_i: Var, tok_l: Var) -> Result<(Option<Var>, Option<Var>)> {
        let (ni, di) = g.shape(tok_i);
        let (nl, dl) = g.shape(tok_l);
        if di != self.config.dim || (nl > 0 && dl != self.config.dim) {
            return Err(Error::shape(format!("token width {di}/{dl} vs extractor width {}", self.config.dim)));
        }
        if ni == 0 && (nl == 0 || self.config.no_local_tokens) {
            return Err(Error::invalid("empty token bundle"));
        }
        if self.config.no_local_tokens || nl == 0 {
            return Ok((Some(tok_i), None));
        }
        match self.config.injection {
            InjectionMethod::Concatenate => Ok((Some(tok_i), Some(tok_l))),
            InjectionMethod::Add | InjectionMethod::LinearProjection if ni != 1 => {
                Err(Error::shape(format!("{} needs exactly one image-level token, got {ni}", self.config.injection)))
            }
            InjectionMethod::Add => Ok((None, Some(g.add_row(tok_l, tok_i)))),
            InjectionMethod::LinearProjection => {
                let ones = g.constant(Mat::filled(nl, 1, 1.0));
                let tiled = g.matmul(ones, tok_i);
                let joined = g.concat_cols(&[tiled, tok_l]);
                Ok((None, Some(self.fuse.forward(g, joined))))
            }
        }
    }

    /// Identity tokens on the graph for a query row `q` (`1 × dim`).
    pub fn forward_var(&self, g: &Graph, q: &Mat, tok_i: Var, tok_l: Var) -> Result<Var> {
        if q.shape() != (1, self.config.dim) {
            return Err(Error::shape(format!("query shape {:?}", q.shape())));
        }
        let (ci, cl) = self.conditions(g, tok_i, tok_l)?;
        let ones = g.constant(Mat::filled(self.config.num_queries, 1, 1.0));
        let mut x = g.add(g.matmul(ones, g.constant(q.clone())), g.param(self.query_offsets));
        for block in &self.blocks {
            x = block.forward(g, x, ci, cl)?;
        }
        Ok(x)
    }

    /// The initial query tokens, `q` plus the learned per-query offsets.
    pub fn initial_queries(&self, params: &ParamSet, query: &GroundedQuery) -> Mat {
        let ones = Mat::filled(self.config.num_queries, 1, 1.0);
        ones.matmul(&query.q).add(params.value(self.query_offsets))
    }

    pub fn extract_identity(
        &self,
        params: &ParamSet,
        bundle: &TokenBundle,
        query: &GroundedQuery,
        object_index: usize,
    ) -> Result<IdentityTokens> {
        let g = Graph::new(params);
        let tok_i = g.constant(bundle.tok_i.clone());
        let tok_l = g.constant(bundle.tok_l.clone());
        let out = self.forward_var(&g, &query.q, tok_i, tok_l)?;
        let tokens = g.value(out);
        if !tokens.is_finite() {
            return Err(Error::invalid("identity tokens are not finite"));
        }
        Ok(IdentityTokens { tokens, object_index })
    }
}
