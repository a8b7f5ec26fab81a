//! Inference: condition assembly, the ancestral DDPM sampler and
//! comparison grids.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{predict_z0_at, LatentGrid, ScheduleConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::id_extractor::validate_box;
use crate::image::Image;
use crate::parallel;
use crate::pipeline::Pipeline;
use crate::tensor::Mat;

pub const DEFAULT_STEPS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    /// Reference image path, relative to the request file.
    pub image: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub text_prompt: String,
    pub subjects: Vec<SubjectSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_archive: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.subjects.len()) {
            return Err(Error::invalid(format!("requests need 1 or 2 subjects, got {}", self.subjects.len())));
        }
        for s in &self.subjects {
            validate_box(s.bbox)?;
        }
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps must be positive"));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::invalid(format!("gamma {g} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Loads the reference images, resolving paths against `base`.
    pub fn load_references(&self, base: &Path) -> Result<Vec<Image>> {
        self.subjects.iter().map(|s| Image::load(base.join(&s.image))).collect()
    }
}

/// A request file holds one request or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RequestFile {
    One(GenerationRequest),
    Many { requests: Vec<GenerationRequest> },
}

impl RequestFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Vec<GenerationRequest>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RequestFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(match file {
            RequestFile::One(r) => vec![r],
            RequestFile::Many { requests } => requests,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub text_prompt: String,
    pub classes: Vec<String>,
    pub boxes: Vec<[f64; 4]>,
    pub seed: u64,
    pub num_steps: usize,
    pub gamma: f64,
    pub timesteps: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub denoiser_fingerprint: String,
    pub adapter_count: usize,
    pub adapter_archive: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub image: Image,
    pub latent: Mat,
    pub metadata: GenerationMetadata,
}

/// `num_steps` timesteps spaced evenly from `T−1` down to 0.
pub fn sampling_timesteps(total: usize, num_steps: usize) -> Vec<usize> {
    let n = num_steps.clamp(1, total);
    if n == 1 {
        return vec![total - 1];
    }
    (0..n).map(|i| ((total - 1) as f64 * (1.0 - i as f64 / (n - 1) as f64)).round() as usize).collect()
}

/// Runs the sampler with the adapters currently attached to `pipeline`.
pub fn generate(pipeline: &Pipeline, req: &GenerationRequest, references: &[Image]) -> Result<Generated> {
    req.validate()?;
    if references.len() != req.subjects.len() {
        return Err(Error::invalid(format!("{} references for {} subjects", references.len(), req.subjects.len())));
    }
    let classes: Vec<String> = req.subjects.iter().map(|s| s.class.clone()).collect();
    let boxes: Vec<[f64; 4]> = req.subjects.iter().map(|s| s.bbox).collect();
    let refs: Vec<Image> = references.iter().map(|r| pipeline.fit(r)).collect();
    let ci = pipeline.identity_condition(&refs, &classes, &boxes)?;
    let ct = pipeline.text_tokens(&req.text_prompt);
    let gamma = req.gamma.unwrap_or(pipeline.denoiser.config.gamma);
    let sched = &pipeline.schedule;
    let side = pipeline.config.denoiser.latent_size;
    let channels = pipeline.codec.channels();
    let timesteps = sampling_timesteps(sched.len(), req.num_steps);

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut z = Mat::randn(side * side, channels, 1.0, &mut rng);
    for (i, &t) in timesteps.iter().enumerate() {
        let g = Graph::new(&pipeline.params);
        let eps = pipeline.denoiser.forward_with_gamma(
            &g,
            g.constant(z.clone()),
            t,
            g.constant(ci.clone()),
            g.constant(ct.clone()),
            gamma,
        )?;
        let ab_t = sched.alpha_bar(t)?;
        let z0 = predict_z0_at(&z, &g.value(eps), t, ab_t)?.map(|v| v.clamp(-1.0, 1.0));
        z = match timesteps.get(i + 1) {
            None => z0,
            Some(&s) => {
                let ab_s = sched.alpha_bar(s)?;
                let a_ts = ab_t / ab_s;
                let c0 = ab_s.sqrt() * (1.0 - a_ts) / (1.0 - ab_t);
                let ct_ = a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
                let std = ((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - a_ts)).max(0.0).sqrt();
                let noise = Mat::randn(z.rows(), z.cols(), 1.0, &mut rng);
                z0.zip_map(&z, |a, b| c0 * a + ct_ * b).zip_map(&noise, |m, n| m + std * n)
            }
        };
        if !z.is_finite() {
            return Err(Error::Diverged { step: i, reason: format!("non-finite latent at t = {t}") });
        }
    }
    let f = pipeline.codec.downscale_factor();
    let image = pipeline.codec.decode(&LatentGrid::new(side, side, f, z.clone())?)?.clamped();
    let metadata = GenerationMetadata {
        text_prompt: req.text_prompt.clone(),
        classes,
        boxes,
        seed: req.seed,
        num_steps: timesteps.len(),
        gamma,
        timesteps,
        schedule: sched.config(),
        denoiser_fingerprint: pipeline.denoiser.config.fingerprint(),
        adapter_count: pipeline.denoiser.attention_layers().map(|l| l.adapters().len()).sum(),
        adapter_archive: req.adapter_archive.clone(),
    };
    Ok(Generated { image, latent: z, metadata })
}

/// Independent requests, generated concurrently.
pub fn generate_batch(pipeline: &Pipeline, jobs: &[(GenerationRequest, Vec<Image>)]) -> Result<Vec<Generated>> {
    parallel::try_map(jobs, |(req, refs)| generate(pipeline, req, refs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub request: GenerationRequest,
    pub metadata: GenerationMetadata,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSidecar {
    pub rows: usize,
    pub cols: usize,
    pub image: String,
    pub cells: Vec<GridCell>,
}

impl GridSidecar {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// The requests in cell order, ready to replay.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.cells.iter().map(|c| c.request.clone()).collect()
    }
}

/// `(rows, cols)` of a near-square row-major grid.
pub fn grid_shape(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    (n.div_ceil(cols), cols)
}

const TILE: usize = 128;
const LINE_H: usize = 7;
const CAPTION_LINES: usize = 3;

/// Tiles the outputs with prompt captions into one image.
pub fn render_grid(requests: &[GenerationRequest], outputs: &[Generated]) -> Result<Image> {
    if requests.len() != outputs.len() {
        return Err(Error::invalid(format!("{} requests for {} outputs", requests.len(), outputs.len())));
    }
    let (rows, cols) = grid_shape(outputs.len());
    let cell_h = TILE + CAPTION_LINES * LINE_H + 2;
    let mut canvas = Image::filled(cols.max(1) * TILE, rows.max(1) * cell_h, [1.0; 3]);
    for (i, (req, out)) in requests.iter().zip(outputs).enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (x0, y0) = (c * TILE, r * cell_h);
        canvas.blit(&out.image.resized(TILE, TILE), x0, y0);
        let per_line = TILE / 4;
        for (k, line) in wrap(&req.text_prompt, per_line).iter().take(CAPTION_LINES).enumerate() {
            draw_text(&mut canvas, line, x0 + 1, y0 + TILE + 1 + k * LINE_H);
        }
    }
    Ok(canvas)
}

/// Writes `name.png` and `name.json` into `dir`.
pub fn grid_report(
    requests: &[GenerationRequest],
    outputs: &[Generated],
    dir: impl AsRef<Path>,
    name: &str,
) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = render_grid(requests, outputs)?;
    let (rows, cols) = grid_shape(outputs.len());
    let png = dir.join(format!("{name}.png"));
    grid.save_png(&png)?;
    let sidecar = GridSidecar {
        rows,
        cols,
        image: format!("{name}.png"),
        cells: requests
            .iter()
            .zip(outputs)
            .enumerate()
            .map(|(index, (request, out))| GridCell {
                index,
                row: index / cols.max(1),
                col: index % cols.max(1),
                request: request.clone(),
                metadata: out.metadata.clone(),
            })
            .collect(),
    };
    let json = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&json, e))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok((png, json))
}

fn wrap(text: &str, width: usize) -> Vec<String> {
    let mut lines = vec![String::new()];
    for word in text.split_whitespace() {
        let cur = lines.last_mut().expect("non-empty");
        if !cur.is_empty() && cur.len() + 1 + word.chars().count() > width {
            lines.push(String::new());
        }
        let cur = lines.last_mut().expect("non-empty");
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.extend(word.chars().take(width));
    }
    lines
}

fn draw_text(img: &mut Image, text: &str, x0: usize, y0: usize) {
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3 {
                if bits & (0b100 >> dx) != 0 {
                    let (x, y) = (x0 + i * 4 + dx, y0 + dy);
                    if x < img.width() && y < img.height() {
                        img.set(x, y, [0.0; 3]);
                    }
                }
            }
        }
    }
}

/// 3×5 bitmap glyphs, one 3-bit row each, top to bottom.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        ' ' => [0; 5],
        '.' => [0, 0, 0, 0, 0b010],
        ',' => [0, 0, 0, 0b010, 0b100],
        '-' => [0, 0, 0b111, 0, 0],
        '\'' => [0b010, 0b010, 0, 0, 0],
        ':' => [0, 0b010, 0, 0b010, 0],
        '/' => [0b001, 0b001, 0b010, 0b100, 0b100],
        '!' => [0b010, 0b010, 0b010, 0, 0b010],
        _ => [0b110, 0b001, 0b010, 0, 0b010],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_span_the_schedule() {
        let ts = sampling_timesteps(1000, 30);
        assert_eq!(ts.len(), 30);
        assert_eq!((ts[0], ts[29]), (999, 0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(sampling_timesteps(1000, 1), vec![999]);
    }

    #[test]
    fn grid_shapes_are_row_major_squares() {
        assert_eq!(grid_shape(1), (1, 1));
        assert_eq!(grid_shape(4), (2, 2));
        assert_eq!(grid_shape(5), (2, 3));
    }

    #[test]
    fn wrap_respects_width() {
        let lines = wrap("A red figure is hugging a blue figure", 12);
        assert!(lines.iter().all(|l| l.len() <= 12));
        assert_eq!(lines.join(" "), "A red figure is hugging a blue figure");
    }
}
