//! Evaluation measures: landmark NAED, joint-histogram MI, image MSE/NCC.

use std::fmt::Write as _;

use thiserror::Error;

use crate::imageio::{Image, LandmarkSet};
use crate::lie_affine::AffineMatrix;
use crate::warp::map_pixel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty landmark set")]
    NoLandmarks,
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("histogram MI needs single-channel images")]
    NotGrayscale,
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("image has zero variance")]
    ZeroVariance,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Per-landmark distances in unit-square coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NaedReport {
    pub distances: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl NaedReport {
    pub fn from_distances(distances: Vec<f64>) -> Result<Self> {
        if distances.is_empty() {
            return Err(MetricsError::NoLandmarks);
        }
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            distances,
            mean,
            std: var.sqrt(),
        })
    }

    /// `pair_index,distance` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_index,distance\n");
        for (i, d) in self.distances.iter().enumerate() {
            let _ = writeln!(out, "{i},{d}");
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "NAED mean={} std={} pairs={}",
            self.mean,
            self.std,
            self.distances.len()
        )
    }
}

fn unit(px: f64, size: usize) -> f64 {
    (px + 0.5) / size as f64
}

/// Map fixed-side landmarks through `h` (fixed → moving) and measure their
/// distance to the moving-side landmarks, each axis scaled to `[0, 1]` by
/// the moving image's width and height. Dims are `(height, width)`.
pub fn naed(
    landmarks: &LandmarkSet,
    h: &AffineMatrix,
    fixed_dims: (usize, usize),
    moving_dims: (usize, usize),
) -> Result<NaedReport> {
    if landmarks.is_empty() {
        return Err(MetricsError::NoLandmarks);
    }
    let (mh, mw) = moving_dims;
    let distances = landmarks
        .pairs()
        .iter()
        .map(|p| {
            let (x, y) = map_pixel(h, p.x_fixed, p.y_fixed, fixed_dims, moving_dims);
            let du = unit(x, mw) - unit(p.x_moving, mw);
            let dv = unit(y, mh) - unit(p.y_moving, mh);
            du.hypot(dv)
        })
        .collect();
    NaedReport::from_distances(distances)
}

fn shape(img: &Image) -> (usize, usize, usize) {
    (img.height(), img.width(), img.channels())
}

fn same_shape(p: &Image, q: &Image) -> Result<()> {
    if shape(p) != shape(q) {
        return Err(MetricsError::ShapeMismatch(shape(p), shape(q)));
    }
    Ok(())
}

fn bin(x: f64, bins: usize) -> usize {
    ((x * bins as f64) as usize).min(bins - 1)
}

/// Order-independent sum, so that permuted term lists give identical totals.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Entropy (nats) of the 1-D intensity histogram.
pub fn histogram_entropy(p: &Image, bins: usize) -> Result<f64> {
    if p.channels() != 1 {
        return Err(MetricsError::NotGrayscale);
    }
    if bins < 2 {
        return Err(MetricsError::TooFewBins(bins));
    }
    let mut counts = vec![0usize; bins];
    for &x in p.data() {
        counts[bin(x, bins)] += 1;
    }
    let n = p.data().len() as f64;
    Ok(-canonical_sum(
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let pr = c as f64 / n;
                pr * pr.ln()
            })
            .collect(),
    ))
}

/// Mutual information (nats) from the normalized joint histogram over
/// `[0, 1]²`.
pub fn histogram_mi(p: &Image, q: &Image, bins: usize) -> Result<f64> {
    same_shape(p, q)?;
    if p.channels() != 1 {
        return Err(MetricsError::NotGrayscale);
    }
    if bins < 2 {
        return Err(MetricsError::TooFewBins(bins));
    }
    let mut joint = vec![0usize; bins * bins];
    let mut mp = vec![0usize; bins];
    let mut mq = vec![0usize; bins];
    for (&a, &b) in p.data().iter().zip(q.data()) {
        let (i, j) = (bin(a, bins), bin(b, bins));
        joint[i * bins + j] += 1;
        mp[i] += 1;
        mq[j] += 1;
    }
    let n = p.data().len() as f64;
    let mut terms = Vec::new();
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            let px = mp[i] as f64 / n;
            let py = mq[j] as f64 / n;
            terms.push(pxy * (pxy / (px * py)).ln());
        }
    }
    Ok(canonical_sum(terms))
}

pub fn image_mse(p: &Image, q: &Image) -> Result<f64> {
    same_shape(p, q)?;
    let n = p.data().len() as f64;
    Ok(p.data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Mean-removed correlation over all pixels and channels, in `[-1, 1]`.
pub fn image_ncc(p: &Image, q: &Image) -> Result<f64> {
    same_shape(p, q)?;
    let (mp, mq) = (p.mean(), q.mean());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.data().iter().zip(q.data()) {
        let (da, db) = (a - mp, b - mq);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
