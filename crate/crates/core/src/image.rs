//! RGB images with `f64` channels in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub type Rgb = [f64; 3];

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Rgb) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Linear combination `a·self + b·other`, used by linearity checks.
    pub fn combine(&self, a: f64, other: &Image, b: f64) -> Image {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Image { width: self.width, height: self.height, data }
    }

    pub fn mean_color(&self) -> Rgb {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Crop to a normalized `(x0, y0, x1, y1)` box; at least one pixel.
    pub fn crop_normalized(&self, b: [f64; 4]) -> Result<Image> {
        let px = |v: f64, n: usize| ((v.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let (x0, y0) = (px(b[0], self.width).min(self.width - 1), px(b[1], self.height).min(self.height - 1));
        let (x1, y1) = (px(b[2], self.width).max(x0 + 1), px(b[3], self.height).max(y0 + 1));
        self.crop(x0, y0, x1 - x0, y1 - y0)
    }

    /// Paste `other` with its top-left corner at `(x0, y0)`, clipping.
    pub fn blit(&mut self, other: &Image, x0: usize, y0: usize) {
        for y in 0..other.height.min(self.height.saturating_sub(y0)) {
            for x in 0..other.width.min(self.width.saturating_sub(x0)) {
                self.set(x0 + x, y0 + y, other.get(x, y));
            }
        }
    }

    /// Nearest-neighbour resample.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        Image::from_fn(width, height, |x, y| {
            let sx = ((x * 2 + 1) * self.width / (width * 2)).min(self.width - 1);
            let sy = ((y * 2 + 1) * self.height / (height * 2)).min(self.height - 1);
            self.get(sx, sy)
        })
    }

    pub fn clamped(&self) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != width * height * 3 {
            return Err(Error::shape("rgb8 buffer length"));
        }
        Ok(Image { width, height, data: bytes.iter().map(|b| f64::from(*b) / 255.0).collect() })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    /// Quantizes to 8 bits per channel, matching a PNG round trip.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same dims")
    }
}
