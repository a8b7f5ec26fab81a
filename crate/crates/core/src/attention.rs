//! Parallel image/text cross-attention with LoRA adapters on the text branch,
//! and the gated self-attention block used by the identity extractor.
//!
//! ```text
//! out = W_out( γ·softmax(Q K_iᵀ/√d) V_i + softmax(Q K_tᵀ/√d) V_t )
//! Q = h W_qᵀ,  K_i = c_i W_k_iᵀ,  V_i = c_i W_v_iᵀ,  K_t = c_t W_k_tᵀ,  V_t = c_t W_v_tᵀ
//! ```
//!
//! Adapters may attach to `W_q`, `W_k_t`, `W_v_t` and `W_out` only; the
//! image-branch projections always run on their frozen base weights.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotName {
    #[serde(rename = "W_q")]
    Query,
    #[serde(rename = "W_k_i")]
    ImageKey,
    #[serde(rename = "W_v_i")]
    ImageValue,
    #[serde(rename = "W_k_t")]
    TextKey,
    #[serde(rename = "W_v_t")]
    TextValue,
    #[serde(rename = "W_out")]
    Out,
}

impl SlotName {
    pub const ALL: [SlotName; 6] = [
        SlotName::Query,
        SlotName::ImageKey,
        SlotName::ImageValue,
        SlotName::TextKey,
        SlotName::TextValue,
        SlotName::Out,
    ];

    /// Slots that accept LoRA adapters.
    pub const ADAPTABLE: [SlotName; 4] = [SlotName::Query, SlotName::TextKey, SlotName::TextValue, SlotName::Out];

    pub fn as_str(self) -> &'static str {
        match self {
            SlotName::Query => "W_q",
            SlotName::ImageKey => "W_k_i",
            SlotName::ImageValue => "W_v_i",
            SlotName::TextKey => "W_k_t",
            SlotName::TextValue => "W_v_t",
            SlotName::Out => "W_out",
        }
    }

    pub fn is_adaptable(self) -> bool {
        Self::ADAPTABLE.contains(&self)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("listed")
    }
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlotName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SlotName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown projection slot {s:?}")))
    }
}

/// One frozen projection weight of shape `(d_out, d_in)`.
#[derive(Clone, Debug)]
pub struct ProjectionSlot {
    pub name: SlotName,
    pub weight: ParamId,
    pub d_out: usize,
    pub d_in: usize,
}

/// Low-rank update `scale · B · A` on top of a frozen slot.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub slot: SlotName,
    /// `(rank, d_in)`.
    pub a: ParamId,
    /// `(d_out, rank)`, zero at attachment.
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// Checks A/B shapes against the slot.
    pub fn validate(&self, params: &ParamSet, slot: &ProjectionSlot) -> Result<()> {
        let (ar, ac) = params.value(self.a).shape();
        let (br, bc) = params.value(self.b).shape();
        if ar != self.rank || bc != self.rank {
            return Err(Error::shape(format!(
                "rank mismatch on {}: A is {ar}x{ac}, B is {br}x{bc}, rank {}",
                slot.name, self.rank
            )));
        }
        if ac != slot.d_in || br != slot.d_out {
            return Err(Error::shape(format!(
                "adapter on {} is {br}x{ac}, slot is {}x{}",
                slot.name, slot.d_out, slot.d_in
            )));
        }
        Ok(())
    }
}

/// Projects row tokens through a slot and its optional adapter:
/// `x·Wᵀ + scale·(x·Aᵀ)·Bᵀ`.
pub fn project(g: &Graph, x: Var, slot: &ProjectionSlot, adapter: Option<&LoraAdapter>) -> Var {
    let w = g.param(slot.weight);
    let base = g.matmul_t(x, w);
    match adapter {
        None => base,
        Some(ad) => {
            let a = g.param(ad.a);
            let b = g.param(ad.b);
            let down = g.matmul_t(x, a);
            let up = g.matmul_t(down, b);
            let up = g.scale(up, ad.scale);
            g.add(base, up)
        }
    }
}

/// `(base + scale·B·A)·x` for each row of `x`; `base·x` without an adapter.
pub fn lora_forward(params: &ParamSet, x: &Mat, slot: &ProjectionSlot, adapter: Option<&LoraAdapter>) -> Result<Mat> {
    if x.cols() != slot.d_in {
        return Err(Error::shape(format!("input width {} for slot {} expecting {}", x.cols(), slot.name, slot.d_in)));
    }
    if let Some(ad) = adapter {
        ad.validate(params, slot)?;
    }
    let g = Graph::new(params);
    let xv = g.constant(x.clone());
    let y = project(&g, xv, slot, adapter);
    Ok(g.value(y))
}

/// Multi-head scaled dot-product attention of `q` over `(k, v)`. All three
/// carry `heads · head_dim` columns.
pub fn multi_head_attention(g: &Graph, q: Var, k: Var, v: Var, heads: usize, head_dim: usize) -> Var {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores);
            g.matmul(w, vh)
        })
        .collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    /// Width of the query-side hidden tokens.
    pub model: usize,
    /// Width of image-condition tokens.
    pub image: usize,
    /// Width of text-condition tokens.
    pub text: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    fn slot_shape(&self, slot: SlotName) -> (usize, usize) {
        let inner = self.inner();
        match slot {
            SlotName::Query => (inner, self.model),
            SlotName::ImageKey | SlotName::ImageValue => (inner, self.image),
            SlotName::TextKey | SlotName::TextValue => (inner, self.text),
            SlotName::Out => (self.model, inner),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParallelCrossAttentionLayer {
    layer_index: usize,
    dims: AttentionDims,
    slots: Vec<ProjectionSlot>,
    adapters: Vec<LoraAdapter>,
    gamma: f64,
}

impl ParallelCrossAttentionLayer {
    /// Registers six frozen base projections named `{prefix}/{slot}`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        layer_index: usize,
        dims: AttentionDims,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
        }
        if dims.heads == 0 || dims.head_dim == 0 {
            return Err(Error::Config("attention needs heads > 0 and head_dim > 0".into()));
        }
        let slots = SlotName::ALL
            .into_iter()
            .map(|name| {
                let (d_out, d_in) = dims.slot_shape(name);
                let w = Mat::randn(d_out, d_in, 1.0 / (d_in as f64).sqrt(), rng);
                let weight = params.add(format!("{prefix}/{name}"), w, false);
                ProjectionSlot { name, weight, d_out, d_in }
            })
            .collect();
        Ok(Self { layer_index, dims, slots, adapters: Vec::new(), gamma })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn dims(&self) -> AttentionDims {
        self.dims
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
        }
        self.gamma = gamma;
        Ok(())
    }

    pub fn slot(&self, name: SlotName) -> &ProjectionSlot {
        &self.slots[name.index()]
    }

    pub fn slots(&self) -> &[ProjectionSlot] {
        &self.slots
    }

    pub fn adapter(&self, name: SlotName) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.slot == name)
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Attaches a fresh adapter: `A ~ N(0, a_std²)`, `B = 0`, trainable.
    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        params: &mut ParamSet,
        slot: SlotName,
        rank: usize,
        scale: f64,
        a_std: f64,
        rng: &mut R,
    ) -> Result<&LoraAdapter> {
        let (d_out, d_in) = self.dims.slot_shape(slot);
        let a = Mat::randn(rank, d_in, a_std, rng);
        let b = Mat::zeros(d_out, rank);
        self.attach_lora_weights(params, slot, a, b, scale)
    }

    /// Attaches an adapter with explicit weights.
    pub fn attach_lora_weights(
        &mut self,
        params: &mut ParamSet,
        slot: SlotName,
        a: Mat,
        b: Mat,
        scale: f64,
    ) -> Result<&LoraAdapter> {
        if !slot.is_adaptable() {
            return Err(Error::Config(format!("adapters cannot attach to image-branch slot {slot}")));
        }
        if self.adapter(slot).is_some() {
            return Err(Error::Config(format!("layer {} already has an adapter on {slot}", self.layer_index)));
        }
        let (d_out, d_in) = self.dims.slot_shape(slot);
        let rank = a.rows();
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::Config(format!("rank {rank} must lie in [1, {})", d_in.min(d_out))));
        }
        let base = params.name(self.slot(slot).weight).to_string();
        let a_id = params.add(format!("{base}/lora_A"), a, true);
        let b_id = params.add(format!("{base}/lora_B"), b, true);
        let adapter = LoraAdapter { slot, a: a_id, b: b_id, rank, scale };
        adapter.validate(params, self.slot(slot))?;
        self.adapters.push(adapter);
        Ok(self.adapters.last().expect("just pushed"))
    }

    fn check_inputs(&self, g: &Graph, h: Var, ci: Var, ct: Var) -> Result<()> {
        let (_, hc) = g.shape(h);
        let (ci_rows, ci_cols) = g.shape(ci);
        let (ct_rows, ct_cols) = g.shape(ct);
        if hc != self.dims.model || ci_cols != self.dims.image || ct_cols != self.dims.text {
            return Err(Error::shape(format!(
                "token widths (h {hc}, c_i {ci_cols}, c_t {ct_cols}) vs layer (model {}, image {}, text {})",
                self.dims.model, self.dims.image, self.dims.text
            )));
        }
        if ci_rows == 0 || ct_rows == 0 {
            return Err(Error::invalid("condition sequences must be non-empty"));
        }
        Ok(())
    }

    pub fn forward(&self, g: &Graph, h: Var, ci: Var, ct: Var) -> Result<Var> {
        self.forward_with_gamma(g, h, ci, ct, self.gamma)
    }

    pub fn forward_with_gamma(&self, g: &Graph, h: Var, ci: Var, ct: Var, gamma: f64) -> Result<Var> {
        self.check_inputs(g, h, ci, ct)?;
        let AttentionDims { heads, head_dim, .. } = self.dims;
        let slot = |n| self.slot(n);
        let q = project(g, h, slot(SlotName::Query), self.adapter(SlotName::Query));
        let ki = project(g, ci, slot(SlotName::ImageKey), None);
        let vi = project(g, ci, slot(SlotName::ImageValue), None);
        let kt = project(g, ct, slot(SlotName::TextKey), self.adapter(SlotName::TextKey));
        let vt = project(g, ct, slot(SlotName::TextValue), self.adapter(SlotName::TextValue));
        let image = multi_head_attention(g, q, ki, vi, heads, head_dim);
        let text = multi_head_attention(g, q, kt, vt, heads, head_dim);
        let image = g.scale(image, gamma);
        let mixed = g.add(image, text);
        Ok(project(g, mixed, slot(SlotName::Out), self.adapter(SlotName::Out)))
    }

    /// The text branch alone, `W_out(softmax(Q K_tᵀ/√d) V_t)`.
    pub fn forward_text_only(&self, g: &Graph, h: Var, ct: Var) -> Result<Var> {
        let AttentionDims { heads, head_dim, .. } = self.dims;
        let q = project(g, h, self.slot(SlotName::Query), self.adapter(SlotName::Query));
        let kt = project(g, ct, self.slot(SlotName::TextKey), self.adapter(SlotName::TextKey));
        let vt = project(g, ct, self.slot(SlotName::TextValue), self.adapter(SlotName::TextValue));
        let text = multi_head_attention(g, q, kt, vt, heads, head_dim);
        Ok(project(g, text, self.slot(SlotName::Out), self.adapter(SlotName::Out)))
    }
}

/// Evaluates the layer on plain matrices.
pub fn parallel_cross_attention(
    params: &ParamSet,
    h: &Mat,
    ci_tokens: &Mat,
    ct_tokens: &Mat,
    layer: &ParallelCrossAttentionLayer,
) -> Result<Mat> {
    let g = Graph::new(params);
    let (h, ci, ct) = (g.constant(h.clone()), g.constant(ci_tokens.clone()), g.constant(ct_tokens.clone()));
    let out = layer.forward(&g, h, ci, ct)?;
    Ok(g.value(out))
}

/// `q + tanh(gate) · W_o(SelfAttn([q, tok_i, tok_l]))[..|q|]`.
#[derive(Clone, Debug)]
pub struct GatedSelfAttentionBlock {
    pub gate: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl GatedSelfAttentionBlock {
    /// Frozen square projections; the gate scalar starts at zero.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        heads: usize,
        train_gate: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible into {heads} heads")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let mut w = |n: &str, rng: &mut R| params.add(format!("{prefix}/{n}"), Mat::randn(dim, dim, std, rng), false);
        let w_q = w("W_q", rng);
        let w_k = w("W_k", rng);
        let w_v = w("W_v", rng);
        let w_o = w("W_o", rng);
        let gate = params.add(format!("{prefix}/gate"), Mat::scalar(0.0), train_gate);
        Ok(Self { gate, w_q, w_k, w_v, w_o, dim, heads })
    }

    pub fn forward(&self, g: &Graph, q: Var, tok_i: Option<Var>, tok_l: Option<Var>) -> Result<Var> {
        let (nq, dq) = g.shape(q);
        if nq == 0 {
            return Err(Error::invalid("gated self-attention needs at least one query token"));
        }
        let mut parts = vec![q];
        for t in [tok_i, tok_l].into_iter().flatten() {
            let (rows, cols) = g.shape(t);
            if cols != dq || dq != self.dim {
                return Err(Error::shape(format!("token width {cols} vs query width {dq}, block width {}", self.dim)));
            }
            if rows > 0 {
                parts.push(t);
            }
        }
        if dq != self.dim {
            return Err(Error::shape(format!("query width {dq} vs block width {}", self.dim)));
        }
        let seq = if parts.len() == 1 { q } else { g.concat_rows(&parts) };
        let qq = g.matmul_t(seq, g.param(self.w_q));
        let kk = g.matmul_t(seq, g.param(self.w_k));
        let vv = g.matmul_t(seq, g.param(self.w_v));
        let att = multi_head_attention(g, qq, kk, vv, self.heads, self.dim / self.heads);
        let read = g.slice_rows(att, 0, nq);
        let proj = g.matmul_t(read, g.param(self.w_o));
        let gate = g.tanh(g.param(self.gate));
        let gated = g.scale_by(proj, gate);
        Ok(g.add(q, gated))
    }
}

/// Evaluates the block on plain matrices. Empty `tok_i`/`tok_l` (zero rows)
/// are skipped.
pub fn gated_self_attention(
    params: &ParamSet,
    q: &Mat,
    tok_i: &Mat,
    tok_l: &Mat,
    block: &GatedSelfAttentionBlock,
) -> Result<Mat> {
    let g = Graph::new(params);
    let qv = g.constant(q.clone());
    let iv = g.constant(tok_i.clone());
    let lv = g.constant(tok_l.clone());
    let out = block.forward(&g, qv, Some(iv), Some(lv))?;
    Ok(g.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> AttentionDims {
        AttentionDims { model: 8, image: 6, text: 5, heads: 2, head_dim: 4 }
    }

    fn layer(params: &mut ParamSet, rng: &mut ChaCha8Rng) -> ParallelCrossAttentionLayer {
        ParallelCrossAttentionLayer::new(params, "l0", 0, dims(), 0.6, rng).unwrap()
    }

    #[test]
    fn image_branch_slots_reject_adapters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let mut l = layer(&mut p, &mut rng);
        for s in [SlotName::ImageKey, SlotName::ImageValue] {
            assert!(l.attach_lora(&mut p, s, 2, 0.5, 0.1, &mut rng).is_err());
        }
        for s in SlotName::ADAPTABLE {
            l.attach_lora(&mut p, s, 2, 0.5, 0.1, &mut rng).unwrap();
        }
        assert!(l.attach_lora(&mut p, SlotName::Query, 2, 0.5, 0.1, &mut rng).is_err());
        assert_eq!(l.adapters().len(), 4);
    }

    #[test]
    fn gamma_outside_unit_interval_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        assert!(ParallelCrossAttentionLayer::new(&mut p, "x", 0, dims(), 1.5, &mut rng).is_err());
    }

    #[test]
    fn single_condition_tokens_reduce_to_value_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let l = layer(&mut p, &mut rng);
        let h = Mat::randn(3, 8, 1.0, &mut rng);
        let ci = Mat::randn(1, 6, 1.0, &mut rng);
        let ct = Mat::randn(1, 5, 1.0, &mut rng);
        let out = parallel_cross_attention(&p, &h, &ci, &ct, &l).unwrap();
        let vi = ci.matmul_t(p.value(l.slot(SlotName::ImageValue).weight));
        let vt = ct.matmul_t(p.value(l.slot(SlotName::TextValue).weight));
        let mixed = vi.scale(0.6).add(&vt);
        let expect_row = mixed.matmul_t(p.value(l.slot(SlotName::Out).weight));
        for r in 0..3 {
            for c in 0..8 {
                assert!((out.get(r, c) - expect_row.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let l = layer(&mut p, &mut rng);
        let h = Mat::zeros(2, 8);
        assert!(parallel_cross_attention(&p, &h, &Mat::zeros(1, 5), &Mat::zeros(1, 5), &l).is_err());
        assert!(parallel_cross_attention(&p, &h, &Mat::zeros(0, 6), &Mat::zeros(1, 5), &l).is_err());
    }

    #[test]
    fn lora_forward_without_adapter_is_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let l = layer(&mut p, &mut rng);
        let x = Mat::randn(2, 8, 1.0, &mut rng);
        let slot = l.slot(SlotName::Query);
        let y = lora_forward(&p, &x, slot, None).unwrap();
        assert_eq!(y, x.matmul_t(p.value(slot.weight)));
        assert!(lora_forward(&p, &Mat::zeros(2, 7), slot, None).is_err());
    }

    #[test]
    fn gate_at_zero_returns_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::new();
        let b = GatedSelfAttentionBlock::new(&mut p, "gsa", 8, 2, true, &mut rng).unwrap();
        let q = Mat::randn(2, 8, 1.0, &mut rng);
        let out = gated_self_attention(&p, &q, &Mat::randn(3, 8, 1.0, &mut rng), &Mat::randn(4, 8, 1.0, &mut rng), &b).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn gated_attention_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let b = GatedSelfAttentionBlock::new(&mut p, "gsa", 8, 2, false, &mut rng).unwrap();
        assert!(gated_self_attention(&p, &Mat::zeros(0, 8), &Mat::zeros(1, 8), &Mat::zeros(1, 8), &b).is_err());
        assert!(gated_self_attention(&p, &Mat::zeros(1, 8), &Mat::zeros(1, 7), &Mat::zeros(1, 8), &b).is_err());
        assert!(GatedSelfAttentionBlock::new(&mut p, "odd", 7, 2, false, &mut rng).is_err());
    }

    #[test]
    fn slot_names_round_trip() {
        for s in SlotName::ALL {
            assert_eq!(s.as_str().parse::<SlotName>().unwrap(), s);
        }
        assert!("W_x".parse::<SlotName>().is_err());
    }
}
