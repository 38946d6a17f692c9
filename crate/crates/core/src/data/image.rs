use std::path::Path;

use ndarray::Array3;

use crate::error::{AfrecError, Result};

/// Square RGB image stored as 8-bit samples; pixel values read back as reals
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    size: usize,
    /// Row-major `size × size × 3`.
    pixels: Vec<u8>,
}

impl Image {
    pub fn from_raw(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(AfrecError::shape(
                format!("{size}x{size}x3 samples"),
                format!("{} samples", pixels.len()),
            ));
        }
        Ok(Self { size, pixels })
    }

    /// Quantises an `H × W × 3` real array (values clamped to `[0, 1]`).
    pub fn from_unit(values: &Array3<f64>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h != w || c != 3 {
            return Err(AfrecError::shape("square HxWx3", format!("{h}x{w}x{c}")));
        }
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self { size: h, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn raw(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        f64::from(self.pixels[(y * self.size + x) * 3 + c]) / 255.0
    }

    #[inline]
    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(y, x, 0), self.get(y, x, 1), self.get(y, x, 2)]
    }

    /// Channel-first tensor `3 × H × W` for the backbone.
    pub fn to_chw(&self) -> Array3<f64> {
        let s = self.size;
        Array3::from_shape_fn((3, s, s), |(c, y, x)| self.get(y, x, c))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(AfrecError::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| AfrecError::DecodeError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        if rgb.width() != rgb.height() {
            return Err(AfrecError::SchemaViolation(format!(
                "{} is {}x{}, images must be square",
                path.display(),
                rgb.width(),
                rgb.height()
            )));
        }
        Self::from_raw(rgb.width() as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let s = self.size as u32;
        image::save_buffer(path, &self.pixels, s, s, image::ExtendedColorType::Rgb8).map_err(|e| {
            match e {
                image::ImageError::IoError(io) => AfrecError::Io(io),
                other => AfrecError::Io(std::io::Error::other(other.to_string())),
            }
        })
    }
}
