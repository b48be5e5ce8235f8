//! Image container, file formats and coordinate conventions.
//!
//! Normalized coordinates place pixel centers at
//! `x = 2(col + 0.5)/W - 1`, `y = 2(row + 0.5)/H - 1`, so the image spans
//! `[-1, 1]²` at every resolution.

mod landmarks;
mod pnm;
mod transform;

use std::path::PathBuf;

use thiserror::Error;

pub use landmarks::{read_landmarks, write_landmarks, LandmarkPair, LandmarkSet};
pub use pnm::{load_image, save_image};
pub use transform::{read_transform, write_transform, Parameterization, TransformRecord};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("malformed image file: {0}")]
    Malformed(String),
    #[error("image must be at least 1x1 with 1 or 3 channels, got {height}x{width}x{channels}")]
    BadDims {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("image is {height}x{width}; registration needs at least {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("intensity {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("no landmarks")]
    NoLandmarks,
    #[error("landmark file {path}: {msg}")]
    Landmarks { path: PathBuf, msg: String },
    #[error("transform file: {0}")]
    Transform(String),
    #[error("transform matrix disagrees with its parameters by {0:e}")]
    Inconsistent(f64),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Smallest side accepted by the registration pipeline.
pub const MIN_SIDE: usize = 8;

/// Dense image with interleaved channels and intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::BadDims {
                height,
                width,
                channels,
            });
        }
        if data.len() != height * width * channels {
            return Err(ImageError::Malformed(format!(
                "expected {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(ImageError::OutOfRange(bad));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Build from a per-pixel function; values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Apply `f` to every intensity, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&x| f(x).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Same geometry with new intensities, clamped into `[0, 1]`.
    pub(crate) fn map_data(&self, mut data: Vec<f64>) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        for x in &mut data {
            *x = x.clamp(0.0, 1.0);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    /// Check the minimum size required for registration.
    pub fn check_registrable(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(ImageError::TooSmall {
                height: self.height,
                width: self.width,
                min: MIN_SIDE,
            });
        }
        Ok(())
    }
}

/// Luma conversion with weights (0.299, 0.587, 0.114); grayscale input is
/// returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    }
}

/// Pixel (column, row) of a pixel center → normalized coordinates.
pub fn pixel_to_normalized(col: f64, row: f64, height: usize, width: usize) -> (f64, f64) {
    (
        2.0 * (col + 0.5) / width as f64 - 1.0,
        2.0 * (row + 0.5) / height as f64 - 1.0,
    )
}

/// Inverse of [`pixel_to_normalized`].
pub fn normalized_to_pixel(x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
    (
        (x + 1.0) * width as f64 / 2.0 - 0.5,
        (y + 1.0) * height as f64 / 2.0 - 0.5,
    )
}
