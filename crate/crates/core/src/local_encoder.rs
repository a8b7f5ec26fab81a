//! Local image encoder: dense features from a modified last layer, local
//! tokens by partition-and-pool, and self-distillation against a frozen
//! teacher's crop embeddings.
//!
//! The dense path replaces the final attention of a vision transformer with
//!
//! ```text
//! h_tmp = Proj_v(norm(h'))
//! h_tmp = h' + Proj_out(h_tmp)
//! h_tmp = h_tmp + FFN(h_tmp)
//! ```
//!
//! so every position keeps its own features instead of mixing with the rest
//! of the image.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::multi_head_attention;
use crate::embedding::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Ffn, Linear, Norm};
use crate::optim::{batch_gradients, Adam};
use crate::parallel;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Mat;

pub const NAMESPACE: &str = "local_encoder";

/// Spatial feature map with the class position removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseFeatureMap {
    pub height: usize,
    pub width: usize,
    /// `(height·width) × dim`, row-major over positions.
    pub features: Mat,
    /// Pixel size `(width, height)` of the image the map came from.
    pub source_resolution: (usize, usize),
}

impl DenseFeatureMap {
    pub fn new(height: usize, width: usize, features: Mat, source_resolution: (usize, usize)) -> Result<Self> {
        if height * width != features.rows() || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "{height}x{width} map needs {} rows, got {}",
                height * width,
                features.rows()
            )));
        }
        Ok(Self { height, width, features, source_resolution })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.features.row(y * self.width + x)
    }
}

/// The parameters of the final transformer layer reused by the dense path.
#[derive(Clone, Debug)]
pub struct LastLayer {
    pub norm: Norm,
    pub proj_v: Linear,
    pub proj_out: Linear,
    pub ffn: Ffn,
}

fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n && s > 0).then_some(s)
}

/// Dense path on the graph. Returns the `(h·w) × dim` features without the
/// class row, and the side length.
pub fn dense_features_var(g: &Graph, tokens: Var, layer: &LastLayer) -> Result<(Var, usize)> {
    let (n, _) = g.shape(tokens);
    let side = n
        .checked_sub(1)
        .and_then(square_side)
        .ok_or_else(|| Error::invalid(format!("{n} tokens: expected a class token plus a square grid")))?;
    let h_tmp = layer.proj_v.forward(g, layer.norm.forward(g, tokens));
    let h_tmp = g.add(tokens, layer.proj_out.forward(g, h_tmp));
    let h_tmp = g.add(h_tmp, layer.ffn.forward(g, h_tmp));
    Ok((g.slice_rows(h_tmp, 1, n - 1), side))
}

/// Dense features of a penultimate-layer token sequence (leading class
/// position included).
pub fn dense_features(
    params: &ParamSet,
    tokens: &Mat,
    layer: &LastLayer,
    source_resolution: (usize, usize),
) -> Result<DenseFeatureMap> {
    let g = Graph::new(params);
    let t = g.constant(tokens.clone());
    let (map, side) = dense_features_var(&g, t, layer)?;
    DenseFeatureMap::new(side, side, g.value(map), source_resolution)
}

/// `(g²) × (h·w)` averaging matrix: row `i` averages the positions of cell
/// `i` in row-major cell order.
pub fn pooling_matrix(height: usize, width: usize, grid: usize) -> Result<Mat> {
    if grid == 0 || height % grid != 0 || width % grid != 0 {
        return Err(Error::invalid(format!("{height}x{width} map is not divisible into a {grid}x{grid} grid")));
    }
    let (ch, cw) = (height / grid, width / grid);
    let weight = 1.0 / (ch * cw) as f64;
    let mut m = Mat::zeros(grid * grid, height * width);
    for y in 0..height {
        for x in 0..width {
            m.set((y / ch) * grid + x / cw, y * width + x, weight);
        }
    }
    Ok(m)
}

/// Average-pools each of the `g×g` cells into one token.
pub fn partition_pool(map: &DenseFeatureMap, grid: usize) -> Result<Mat> {
    Ok(pooling_matrix(map.height, map.width, grid)?.matmul(&map.features))
}

fn check_pair(student: (usize, usize), teacher: &Mat) -> Result<()> {
    if student != teacher.shape() {
        return Err(Error::shape(format!("student {student:?} vs teacher {:?}", teacher.shape())));
    }
    Ok(())
}

fn check_norms(m: &Mat, who: &str) -> Result<()> {
    for r in 0..m.rows() {
        if m.row(r).iter().all(|v| *v == 0.0) {
            return Err(Error::invalid(format!("{who} token {r} has zero norm")));
        }
    }
    Ok(())
}

/// Mean over tokens of `1 − cos(student, teacher)`.
pub fn distill_loss(student: &Mat, teacher: &Mat) -> Result<f64> {
    check_pair(student.shape(), teacher)?;
    check_norms(student, "student")?;
    check_norms(teacher, "teacher")?;
    let total: f64 = (0..student.rows())
        .map(|r| 1.0 - crate::embedding::cosine(student.row(r), teacher.row(r)))
        .sum();
    Ok(total / student.rows() as f64)
}

/// Graph version of [`distill_loss`]; the teacher is a constant.
pub fn distill_loss_var(g: &Graph, student: Var, teacher: &Mat) -> Result<Var> {
    check_pair(g.shape(student), teacher)?;
    check_norms(&g.value(student), "student")?;
    check_norms(teacher, "teacher")?;
    let mut t = teacher.clone();
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    let s = g.normalize_rows(student);
    let cos = g.row_sum(g.mul(s, g.constant(t)));
    let one = g.constant(Mat::filled(teacher.rows(), 1, 1.0));
    Ok(g.mean(g.sub(one, cos)))
}

/// Tiles the image into `g×g` crops and embeds each with the teacher,
/// row-major.
pub fn teacher_crop_tokens(image: &Image, grid: usize, teacher: &dyn EmbeddingBackend) -> Result<Mat> {
    let (w, h) = (image.width(), image.height());
    if grid == 0 || w % grid != 0 || h % grid != 0 {
        return Err(Error::invalid(format!("{w}x{h} image is not divisible into a {grid}x{grid} grid")));
    }
    let (cw, ch) = (w / grid, h / grid);
    let rows = parallel::map_range(grid * grid, |i| {
        let (cy, cx) = (i / grid, i % grid);
        teacher.image_embed(&image.crop(cx * cw, cy * ch, cw, ch)?)
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    Mat::from_rows(&rows)
}

/// Image-level and local tokens of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBundle {
    pub tok_i: Mat,
    pub tok_l: Mat,
    pub partition_grid: usize,
}

impl TokenBundle {
    pub fn new(tok_i: Mat, tok_l: Mat, partition_grid: usize) -> Result<Self> {
        if tok_l.rows() != partition_grid * partition_grid {
            return Err(Error::shape(format!(
                "{} local tokens for a {partition_grid}x{partition_grid} grid",
                tok_l.rows()
            )));
        }
        if tok_i.cols() != tok_l.cols() {
            return Err(Error::shape("image-level and local token widths differ"));
        }
        Ok(Self { tok_i, tok_l, partition_grid })
    }

    pub fn dim(&self) -> usize {
        self.tok_i.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub out_dim: usize,
    pub grid: usize,
}

impl Default for LocalEncoderConfig {
    fn default() -> Self {
        Self { image_size: 64, patch_size: 8, width: 32, heads: 2, layers: 2, mlp_hidden: 64, out_dim: 16, grid: 4 }
    }
}

impl LocalEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let side = self.image_size / self.patch_size.max(1);
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!("image_size {} not a multiple of patch_size", self.image_size)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config("width must be divisible by heads".into()));
        }
        if self.layers < 1 {
            return Err(Error::Config("local encoder needs at least one layer".into()));
        }
        if self.grid == 0 || side % self.grid != 0 {
            return Err(Error::Config(format!("{side}x{side} patch grid not divisible by grid {}", self.grid)));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ffn: Ffn,
}

impl Block {
    fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, cfg: &LocalEncoderConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        Self {
            ln1: Norm::layer_norm(params, &format!("{name}/ln1"), d, true),
            q: Linear::new(params, &format!("{name}/q"), d, d, true, true, rng),
            k: Linear::new(params, &format!("{name}/k"), d, d, true, true, rng),
            v: Linear::new(params, &format!("{name}/v"), d, d, true, true, rng),
            o: Linear::new(params, &format!("{name}/o"), d, d, true, true, rng),
            ln2: Norm::layer_norm(params, &format!("{name}/ln2"), d, true),
            ffn: Ffn::new(params, &format!("{name}/ffn"), d, cfg.mlp_hidden, true, rng),
        }
    }

    /// Standard pre-norm block; only the rows in `[0, out_rows)` are
    /// returned, all rows serve as keys.
    fn forward(&self, g: &Graph, x: Var, out_rows: usize, heads: usize) -> Var {
        let d = g.shape(x).1;
        let n = self.ln1.forward(g, x);
        let nq = if out_rows == g.shape(x).0 { n } else { g.slice_rows(n, 0, out_rows) };
        let attn = multi_head_attention(g, self.q.forward(g, nq), self.k.forward(g, n), self.v.forward(g, n), heads, d / heads);
        let xr = if out_rows == g.shape(x).0 { x } else { g.slice_rows(x, 0, out_rows) };
        let h = g.add(xr, self.o.forward(g, attn));
        g.add(h, self.ffn.forward(g, self.ln2.forward(g, h)))
    }

    fn last_layer(&self) -> LastLayer {
        LastLayer { norm: self.ln1.clone(), proj_v: self.v.clone(), proj_out: self.o.clone(), ffn: self.ffn.clone() }
    }
}

/// Small vision transformer producing `tok_i` (class path) and `tok_l`
/// (dense path, pooled).
#[derive(Clone, Debug)]
pub struct LocalEncoder {
    pub config: LocalEncoderConfig,
    patch_embed: Linear,
    class_token: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    ln_post: Norm,
    proj: Linear,
}

impl LocalEncoder {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, config: LocalEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let p = config.patch_size;
        let n = config.patches_per_side().pow(2);
        let patch_embed = Linear::new(params, &format!("{NAMESPACE}/patch_embed"), 3 * p * p, d, true, true, rng);
        let class_token = params.add(format!("{NAMESPACE}/class_token"), Mat::randn(1, d, 0.1, rng), true);
        let positions = params.add(format!("{NAMESPACE}/positions"), Mat::randn(n + 1, d, 0.1, rng), true);
        let blocks = (0..config.layers)
            .map(|i| Block::new(params, &format!("{NAMESPACE}/block{i}"), &config, rng))
            .collect();
        let ln_post = Norm::layer_norm(params, &format!("{NAMESPACE}/ln_post"), d, true);
        let proj = Linear::new(params, &format!("{NAMESPACE}/proj"), d, config.out_dim, false, true, rng);
        Ok(Self { config, patch_embed, class_token, positions, blocks, ln_post, proj })
    }

    /// Ids of every encoder parameter.
    pub fn param_ids(params: &ParamSet) -> Vec<ParamId> {
        let prefix = format!("{NAMESPACE}/");
        params.ids().filter(|id| params.name(*id).starts_with(&prefix)).collect()
    }

    /// Rows are patches in row-major order, columns the centred pixel values.
    pub fn patchify(&self, image: &Image) -> Mat {
        let size = self.config.image_size;
        let img = image.resized(size, size);
        let p = self.config.patch_size;
        let side = self.config.patches_per_side();
        let mut m = Mat::zeros(side * side, 3 * p * p);
        for py in 0..side {
            for px in 0..side {
                let row = m.row_mut(py * side + px);
                for y in 0..p {
                    for x in 0..p {
                        let c = img.get(px * p + x, py * p + y);
                        for k in 0..3 {
                            row[(y * p + x) * 3 + k] = c[k] - 0.5;
                        }
                    }
                }
            }
        }
        m
    }

    /// Token sequence entering the last layer (class token first).
    pub fn penultimate_var(&self, g: &Graph, image: &Image) -> Var {
        let patches = self.patch_embed.forward(g, g.constant(self.patchify(image)));
        let x = g.concat_rows(&[g.param(self.class_token), patches]);
        let mut x = g.add(x, g.param(self.positions));
        let n = g.shape(x).0;
        for block in &self.blocks[..self.blocks.len() - 1] {
            x = block.forward(g, x, n, self.config.heads);
        }
        x
    }

    pub fn last_layer(&self) -> LastLayer {
        self.blocks[self.blocks.len() - 1].last_layer()
    }

    /// Dense features on the graph, before the output projection.
    pub fn dense_var(&self, g: &Graph, image: &Image) -> Result<(Var, usize)> {
        let h = self.penultimate_var(g, image);
        dense_features_var(g, h, &self.last_layer())
    }

    /// `(tok_i, tok_l)` on the graph.
    pub fn encode_var(&self, g: &Graph, image: &Image) -> Result<(Var, Var)> {
        let h = self.penultimate_var(g, image);
        let last = &self.blocks[self.blocks.len() - 1];
        let cls = last.forward(g, h, 1, self.config.heads);
        let tok_i = self.proj.forward(g, self.ln_post.forward(g, cls));
        let (dense, side) = dense_features_var(g, h, &self.last_layer())?;
        let pool = g.constant(pooling_matrix(side, side, self.config.grid)?);
        let pooled = g.matmul(pool, dense);
        let tok_l = self.proj.forward(g, self.ln_post.forward(g, pooled));
        Ok((tok_i, tok_l))
    }

    pub fn encode(&self, params: &ParamSet, image: &Image) -> Result<TokenBundle> {
        let g = Graph::new(params);
        let (tok_i, tok_l) = self.encode_var(&g, image)?;
        TokenBundle::new(g.value(tok_i), g.value(tok_l), self.config.grid)
    }

    /// Projected per-position dense tokens, for inspection.
    pub fn projected_dense_map(&self, params: &ParamSet, image: &Image) -> Result<DenseFeatureMap> {
        let g = Graph::new(params);
        let (dense, side) = self.dense_var(&g, image)?;
        let tokens = self.proj.forward(&g, self.ln_post.forward(&g, dense));
        DenseFeatureMap::new(side, side, g.value(tokens), (image.width(), image.height()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub num_images: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 3e-3, weight_decay: 0.0, batch_size: 8, num_images: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Mean loss over the whole image set after training.
    pub final_loss: f64,
}

/// Mean distillation loss of the encoder's local tokens over `images`.
pub fn evaluate_distill(params: &ParamSet, enc: &LocalEncoder, images: &[Image], teacher: &[Mat]) -> Result<f64> {
    let idx: Vec<usize> = (0..images.len()).collect();
    let losses = parallel::try_map(&idx, |&i| {
        let b = enc.encode(params, &images[i])?;
        distill_loss(&b.tok_l, &teacher[i])
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains every encoder parameter to align local tokens with the teacher's
/// crop embeddings.
pub fn distill(
    params: &mut ParamSet,
    enc: &LocalEncoder,
    teacher: &dyn EmbeddingBackend,
    images: &[Image],
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    if images.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid("distillation needs images and a positive batch size"));
    }
    let targets = images
        .iter()
        .map(|img| teacher_crop_tokens(&img.resized(enc.config.image_size, enc.config.image_size), enc.config.grid, teacher))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut opt = Adam::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let bg = batch_gradients(params, &batch, |g, &i| {
            let (_, tok_l) = enc.encode_var(g, &images[i])?;
            Ok((distill_loss_var(g, tok_l, &targets[i])?, ()))
        })?;
        let loss = bg.mean_loss();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, reason: "non-finite distillation loss".into() });
        }
        losses.push(loss);
        opt.step(params, &bg.grads);
        if step % 50 == 0 {
            log::debug!("distill step {step}: loss {loss:.5}");
        }
    }
    let final_loss = evaluate_distill(params, enc, images, &targets)?;
    Ok(DistillReport { losses, final_loss })
}

/// Principal-component projection of feature rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// One unit-norm direction per row, by decreasing variance.
    pub components: Mat,
    pub variances: Vec<f64>,
    /// Input rows in component coordinates.
    pub coords: Mat,
}

/// Projects the rows of `features` onto their top `k` principal
/// directions. Each direction's sign is fixed so that its largest-magnitude
/// entry is positive.
pub fn principal_components(features: &Mat, k: usize) -> Result<Projection> {
    let (n, d) = features.shape();
    if n < 2 || k == 0 || k > d {
        return Err(Error::invalid(format!("PCA of {n}×{d} features onto {k} components")));
    }
    let mean = features.mean_rows().into_vec();
    let centred = nalgebra::DMatrix::from_fn(n, d, |r, c| features.get(r, c) - mean[c]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Mat::zeros(k, d);
    let mut variances = Vec::with_capacity(k);
    for (row, &j) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(j);
        let peak = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if peak < 0.0 { -1.0 } else { 1.0 };
        for c in 0..d {
            components.set(row, c, sign * v[c]);
        }
        variances.push(eig.eigenvalues[j].max(0.0));
    }
    let centred = Mat::from_vec(n, d, (0..n * d).map(|i| features.as_slice()[i] - mean[i % d]).collect())?;
    let coords = centred.matmul_t(&components);
    Ok(Projection { mean, components, variances, coords })
}

/// Fixed synthetic image set: a flat background with a few coloured
/// rectangles.
pub fn synthetic_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let bg = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let mut img = Image::filled(size, size, bg);
            for _ in 0..rng.random_range(2..=4) {
                let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                let w = rng.random_range(size / 8..=size / 2);
                let h = rng.random_range(size / 8..=size / 2);
                let x0 = rng.random_range(0..=size - w);
                let y0 = rng.random_range(0..=size - h);
                img.blit(&Image::filled(w, h, c), x0, y0);
            }
            img
        })
        .collect()
}
