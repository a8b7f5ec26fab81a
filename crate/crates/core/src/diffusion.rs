//! Latent-diffusion substrate: latent grids, the noise schedule, closed-form
//! noising and clean-latent recovery, and a fixed linear patch codec.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::tensor::Mat;

/// A `(channels, height, width)` latent. Stored one spatial position per
/// row (row-major over `(y, x)`), one channel per column.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    downscale_factor: usize,
    tokens: Mat,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, downscale_factor: usize, tokens: Mat) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(Error::shape(format!(
                "{} token rows for a {height}x{width} latent",
                tokens.rows()
            )));
        }
        if downscale_factor == 0 {
            return Err(Error::invalid("downscale factor must be positive"));
        }
        if !tokens.is_finite() {
            return Err(Error::invalid("latent contains non-finite values"));
        }
        Ok(Self { height, width, downscale_factor, tokens })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, downscale_factor: usize) -> Self {
        Self { height, width, downscale_factor, tokens: Mat::zeros(height * width, channels) }
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn downscale_factor(&self) -> usize {
        self.downscale_factor
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn into_tokens(self) -> Mat {
        self.tokens
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tokens.get(y * self.width + x, c)
    }

    /// Same geometry, new values.
    pub fn with_tokens(&self, tokens: Mat) -> Result<Self> {
        if tokens.shape() != self.tokens.shape() {
            return Err(Error::shape(format!("{:?} vs {:?}", tokens.shape(), self.tokens.shape())));
        }
        LatentGrid::new(self.height, self.width, self.downscale_factor, tokens)
    }

    fn check_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.tokens.shape() != other.tokens.shape() || self.height != other.height {
            return Err(Error::shape(format!(
                "latent {}x{}x{} vs {}x{}x{}",
                self.channels(),
                self.height,
                self.width,
                other.channels(),
                other.height,
                other.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    /// β linear in `t`.
    Linear,
    /// √β linear in `t`.
    ScaledLinear,
}

/// The serialized form of a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub family: ScheduleFamily,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { family: ScheduleFamily::Linear, steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Cumulative signal levels `ᾱ_t` for `t ∈ [0, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleConfig", into = "ScheduleConfig")]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

impl TryFrom<ScheduleConfig> for NoiseSchedule {
    type Error = Error;

    fn try_from(c: ScheduleConfig) -> Result<Self> {
        NoiseSchedule::new(c)
    }
}

impl From<NoiseSchedule> for ScheduleConfig {
    fn from(s: NoiseSchedule) -> Self {
        s.config
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { family, steps, beta_start, beta_end } = config;
        if steps == 0 {
            return Err(Error::Config("schedule needs T > 0".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let frac = |t: usize| if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
        let betas = (0..steps).map(|t| match family {
            ScheduleFamily::Linear => beta_start + (beta_end - beta_start) * frac(t),
            ScheduleFamily::ScaledLinear => {
                let s = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac(t);
                s * s
            }
        });
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        if alpha_bar[0] < 0.999 {
            return Err(Error::Config(format!("alpha_bar[0] = {} < 0.999", alpha_bar[0])));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("alpha_bar must be strictly decreasing within (0, 1]".into()));
        }
        Ok(Self { config, alpha_bar })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::invalid(format!("timestep {t} outside [0, {})", self.alpha_bar.len()))
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(z0: &LatentGrid, t: usize, eps: &LatentGrid, sched: &NoiseSchedule) -> Result<LatentGrid> {
    z0.check_same_shape(eps)?;
    let ab = sched.alpha_bar(t)?;
    z0.with_tokens(forward_noise_at(z0.tokens(), eps.tokens(), ab)?)
}

/// Forward noising at an explicit noise level.
pub fn forward_noise_at(z0: &Mat, eps: &Mat, alpha_bar: f64) -> Result<Mat> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("z0 and eps differ"));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// `(z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_z0(zt: &LatentGrid, eps_hat: &LatentGrid, t: usize, sched: &NoiseSchedule) -> Result<LatentGrid> {
    zt.check_same_shape(eps_hat)?;
    let ab = sched.alpha_bar(t)?;
    let tokens = predict_z0_at(zt.tokens(), eps_hat.tokens(), t, ab)?;
    zt.with_tokens(tokens)
}

/// Clean-latent recovery at an explicit noise level.
pub fn predict_z0_at(zt: &Mat, eps_hat: &Mat, t: usize, alpha_bar: f64) -> Result<Mat> {
    if zt.shape() != eps_hat.shape() {
        return Err(Error::shape("z_t and eps_hat differ"));
    }
    if alpha_bar <= 0.0 {
        return Err(Error::Singular { t });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(zt.zip_map(eps_hat, |z, e| (z - b * e) / a))
}

/// Differentiable clean-latent recovery: linear in `ε̂`.
pub fn predict_z0_var(g: &Graph, zt: Var, eps_hat: Var, alpha_bar: f64) -> Var {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let scaled = g.scale(eps_hat, b);
    let diff = g.sub(zt, scaled);
    g.scale(diff, 1.0 / a)
}

/// Fixed linear codec mapping `f x f` RGB pixel patches to latent channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCodec {
    downscale_factor: usize,
    /// `(channels, 3·f²)`, orthonormal rows. Patch vectors are laid out as
    /// `(dy, dx, colour)`.
    channel_map: Mat,
    /// Pseudo-inverse of `channel_map`; its transpose because rows are
    /// orthonormal.
    inverse: Mat,
    latent_scale: f64,
}

impl Default for ToyCodec {
    fn default() -> Self {
        Self::new(8)
    }
}

impl ToyCodec {
    /// Four channels: three per-colour patch means plus a left/right
    /// luminance edge channel.
    pub fn new(downscale_factor: usize) -> Self {
        let f = downscale_factor;
        let mut map = Self::averaging_map(f, 4);
        let norm = 1.0 / (f as f64 * 3f64.sqrt());
        for dy in 0..f {
            for dx in 0..f {
                let sign = if dx < f / 2 { 1.0 } else { -1.0 };
                for c in 0..3 {
                    map.set(3, (dy * f + dx) * 3 + c, sign * norm);
                }
            }
        }
        Self::from_map(f, map)
    }

    /// Three channels, each the (scaled) patch mean of one colour.
    pub fn averaging(downscale_factor: usize) -> Self {
        Self::from_map(downscale_factor, Self::averaging_map(downscale_factor, 3))
    }

    fn averaging_map(f: usize, channels: usize) -> Mat {
        let mut map = Mat::zeros(channels, 3 * f * f);
        for p in 0..f * f {
            for c in 0..3 {
                map.set(c, p * 3 + c, 1.0 / f as f64);
            }
        }
        map
    }

    fn from_map(downscale_factor: usize, channel_map: Mat) -> Self {
        assert!(downscale_factor > 0, "downscale factor must be positive");
        let inverse = channel_map.transpose();
        // Pixels are centred on mid-grey, so colour channels come out as
        // twice the patch mean minus one, within [-1, 1].
        let latent_scale = 2.0 / downscale_factor as f64;
        Self { downscale_factor, channel_map, inverse, latent_scale }
    }

    pub fn downscale_factor(&self) -> usize {
        self.downscale_factor
    }

    pub fn channels(&self) -> usize {
        self.channel_map.rows()
    }

    pub fn channel_map(&self) -> &Mat {
        &self.channel_map
    }

    pub fn encode(&self, img: &Image) -> Result<LatentGrid> {
        let f = self.downscale_factor;
        if img.width() % f != 0 || img.height() % f != 0 || img.width() == 0 || img.height() == 0 {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by downscale factor {f}",
                img.width(),
                img.height()
            )));
        }
        let (h, w) = (img.height() / f, img.width() / f);
        let mut patches = Mat::zeros(h * w, 3 * f * f);
        for py in 0..h {
            for px in 0..w {
                let row = patches.row_mut(py * w + px);
                for dy in 0..f {
                    for dx in 0..f {
                        let rgb = img.get(px * f + dx, py * f + dy);
                        for c in 0..3 {
                            row[(dy * f + dx) * 3 + c] = rgb[c] - 0.5;
                        }
                    }
                }
            }
        }
        let tokens = patches.matmul_t(&self.channel_map).scale(self.latent_scale);
        LatentGrid::new(h, w, f, tokens)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Image> {
        let f = self.downscale_factor;
        if z.channels() != self.channels() || z.downscale_factor() != f {
            return Err(Error::shape(format!(
                "latent with {} channels at factor {} for a {}-channel factor-{f} codec",
                z.channels(),
                z.downscale_factor(),
                self.channels()
            )));
        }
        let patches = z.tokens().matmul_t(&self.inverse).scale(1.0 / self.latent_scale);
        let mut img = Image::new(z.width() * f, z.height() * f);
        for py in 0..z.height() {
            for px in 0..z.width() {
                let row = patches.row(py * z.width() + px);
                for dy in 0..f {
                    for dx in 0..f {
                        let o = (dy * f + dx) * 3;
                        img.set(px * f + dx, py * f + dy, [row[o] + 0.5, row[o + 1] + 0.5, row[o + 2] + 0.5]);
                    }
                }
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(values: Mat) -> LatentGrid {
        LatentGrid::new(2, 2, 8, values).unwrap()
    }

    fn schedule_with_alpha_bar_index(target: f64) -> (NoiseSchedule, usize) {
        let s = NoiseSchedule::default();
        let t = s.alpha_bars().iter().position(|a| *a <= target).unwrap();
        (s, t)
    }

    #[test]
    fn t_zero_keeps_almost_all_signal() {
        let s = NoiseSchedule::default();
        assert!(s.alpha_bar(0).unwrap() >= 0.999);
        assert!(s.alpha_bar(s.len()).is_err());
    }

    #[test]
    fn forward_noise_closed_form_values() {
        // Expected values from a standalone scalar evaluation.
        let z0 = Mat::filled(4, 4, 1.0);
        let eps = Mat::filled(4, 4, 0.5);
        let out = forward_noise_at(&z0, &eps, 0.25).unwrap();
        for v in out.as_slice() {
            assert!((v - 0.9330127018922193).abs() < 1e-12);
        }
        let back = predict_z0_at(&Mat::filled(4, 4, 1.0), &eps, 7, 0.25).unwrap();
        for v in back.as_slice() {
            assert!((v - 1.1339745962155614).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_signal_and_identity_cases() {
        let (s, t) = schedule_with_alpha_bar_index(0.25);
        let ab = s.alpha_bar(t).unwrap();
        let eps = grid(Mat::filled(4, 3, 0.7));
        let z0 = grid(Mat::zeros(4, 3));
        let out = forward_noise(&z0, t, &eps, &s).unwrap();
        for v in out.tokens().as_slice() {
            assert!((v - (1.0 - ab).sqrt() * 0.7).abs() < 1e-12);
        }
        let same = predict_z0_at(&Mat::filled(2, 2, 3.0), &Mat::filled(2, 2, 9.0), 0, 1.0).unwrap();
        assert_eq!(same, Mat::filled(2, 2, 3.0));
    }

    #[test]
    fn singular_alpha_bar_is_rejected() {
        let err = predict_z0_at(&Mat::zeros(1, 1), &Mat::zeros(1, 1), 3, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { t: 3 }));
    }

    #[test]
    fn shape_and_range_errors() {
        let s = NoiseSchedule::default();
        let a = grid(Mat::zeros(4, 4));
        let b = LatentGrid::new(1, 4, 8, Mat::zeros(4, 4)).unwrap();
        assert!(forward_noise(&a, 0, &b, &s).is_err());
        assert!(forward_noise(&a, 1000, &a, &s).is_err());
        assert!(LatentGrid::new(3, 3, 8, Mat::zeros(4, 4)).is_err());
    }

    #[test]
    fn round_trip_is_exact_to_machine_precision() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = rng.random_range(0..s.len());
            let z0 = grid(Mat::randn(4, 4, 1.0, &mut rng));
            let eps = grid(Mat::randn(4, 4, 1.0, &mut rng));
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = predict_z0(&zt, &eps, t, &s).unwrap();
            assert!(back.tokens().max_abs_diff(z0.tokens()) < 1e-9);
        }
    }

    #[test]
    fn schedule_validation() {
        for family in [ScheduleFamily::Linear, ScheduleFamily::ScaledLinear] {
            for steps in [1, 10, 1000] {
                let s = NoiseSchedule::new(ScheduleConfig { family, steps, beta_start: 1e-4, beta_end: 2e-2 });
                assert!(s.is_ok(), "{family:?} {steps}");
            }
        }
        let bad = ScheduleConfig { beta_start: 0.01, ..ScheduleConfig::default() };
        assert!(NoiseSchedule::new(bad).is_err());
        let bad = ScheduleConfig { beta_start: 0.0, ..ScheduleConfig::default() };
        assert!(NoiseSchedule::new(bad).is_err());
    }

    #[test]
    fn schedule_json_shape() {
        let s = NoiseSchedule::default();
        let j = serde_json::to_value(&s).unwrap();
        assert_eq!(j, serde_json::json!({"family": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 2e-2}));
        let back: NoiseSchedule = serde_json::from_value(j).unwrap();
        assert_eq!(back, s);
        let bad = serde_json::json!({"family": "linear", "T": 0, "beta_start": 1e-4, "beta_end": 2e-2});
        assert!(serde_json::from_value::<NoiseSchedule>(bad).is_err());
    }

    #[test]
    fn codec_rows_are_orthonormal() {
        let c = ToyCodec::default();
        let gram = c.channel_map().matmul_t(c.channel_map());
        assert!(gram.max_abs_diff(&Mat::identity(4)) < 1e-12);
    }

    #[test]
    fn constant_image_gives_constant_latent() {
        let c = ToyCodec::default();
        let z = c.encode(&Image::filled(32, 16, [0.2, 0.4, 0.6])).unwrap();
        assert_eq!((z.height(), z.width()), (2, 4));
        for r in 0..z.tokens().rows() {
            let row = z.tokens().row(r);
            assert!((row[0] + 0.6).abs() < 1e-12 && (row[1] + 0.2).abs() < 1e-12);
            assert!((row[2] - 0.2).abs() < 1e-12 && row[3].abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        assert!(ToyCodec::default().encode(&Image::new(20, 16)).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let c = ToyCodec::default();
        let img = Image::from_fn(16, 16, |x, y| [x as f64 / 16.0, y as f64 / 16.0, 0.5]);
        assert_eq!(c.encode(&img).unwrap(), c.encode(&img).unwrap());
    }
}
