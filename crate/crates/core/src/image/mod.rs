//! Raster types, file I/O and the post-processing perturbations used for
//! augmentation and robustness sweeps.

mod io;
mod jpeg;
mod ops;

pub use io::{load_gray_u8, load_image, save_image, save_plane};
pub use jpeg::{
    dct8x8_orthonormal, idct8x8_orthonormal, jpeg_simulate, quality_table, quantize_dequantize,
    CHROMA_TABLE, LUMA_TABLE,
};
pub use ops::{gaussian_blur, gaussian_blur_plane, gaussian_kernel, resize_bilinear, resize_plane, to_gray, LUMA};

use std::path::PathBuf;

/// Smallest accepted width or height of an [`ImageRGB`].
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(thiserror::Error, Debug)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: unsupported image format (expected PNG, PPM or PGM)")]
    UnsupportedFormat(PathBuf),
    #[error("{path}: cannot decode image: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("image is {width}x{height}; both sides must be at least {MIN_IMAGE_SIDE}")]
    TooSmall { width: usize, height: usize },
    #[error("pixel buffer holds {len} values, expected {expected}")]
    BufferSize { len: usize, expected: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(ImageError::TooSmall { width, height });
        }
        if pixels.len() != 3 * width * height {
            return Err(ImageError::BufferSize {
                len: pixels.len(),
                expected: 3 * width * height,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel values scaled to `[0, 1]`, interleaved `[H, W, 3]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// Inverse of [`ImageRGB::to_unit`], rounding and clamping each channel.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|&v| unit_to_u8(v)).collect();
        Self::new(width, height, pixels)
    }
}

pub(crate) fn unit_to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Single-channel `f64` raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImageError::TooSmall { width, height });
        }
        if values.len() != width * height {
            return Err(ImageError::BufferSize {
                len: values.len(),
                expected: width * height,
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::InvalidParameter(format!(
                "plane value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| unit_to_u8(v)).collect()
    }
}

#[cfg(test)]
mod tests;
