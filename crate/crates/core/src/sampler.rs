//! Pixel subsets of the fixed pyramid that enter each MINE batch.

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::imageio::{to_grayscale, Image};
use crate::pyramid::separable_blur;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("sample fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("invalid canny parameters: {0}")]
    BadCanny(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOrigin {
    Random,
    Edges,
    /// Too few edges; a random draw was used instead.
    Fallback,
}

/// Unique `(row, col)` locations on one pyramid level, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub level: usize,
    pub indices: Vec<(usize, usize)>,
    pub origin: SampleOrigin,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_fraction(fraction: f64) -> Result<(), SamplerError> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(SamplerError::BadFraction(fraction))
    }
}

fn to_rc(flat: impl IntoIterator<Item = usize>, width: usize) -> Vec<(usize, usize)> {
    let mut v: Vec<usize> = flat.into_iter().collect();
    v.sort_unstable();
    v.into_iter().map(|i| (i / width, i % width)).collect()
}

/// `floor(fraction·H·W)` distinct pixels drawn uniformly without
/// replacement; all pixels if that count is zero.
pub fn random_sample<R: Rng + ?Sized>(
    level: usize,
    dims: (usize, usize),
    fraction: f64,
    rng: &mut R,
) -> Result<SampleSet, SamplerError> {
    check_fraction(fraction)?;
    let (h, w) = dims;
    let total = h * w;
    let count = (fraction * total as f64).floor() as usize;
    let indices = if count == 0 || count >= total {
        (0..total).map(|i| (i / w, i % w)).collect()
    } else {
        to_rc(rand::seq::index::sample(rng, total, count), w)
    };
    Ok(SampleSet {
        level,
        indices,
        origin: SampleOrigin::Random,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub low_frac: f64,
    pub high_frac: f64,
    /// Maximum number of edge pixels kept.
    pub cap: usize,
    /// Below this many edge pixels the random fallback is used.
    pub min_edges: usize,
    pub fallback_fraction: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            low_frac: 0.1,
            high_frac: 0.2,
            cap: 50_000,
            min_edges: 64,
            fallback_fraction: 0.1,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::BadCanny(m.into()));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be non-negative");
        }
        if !(0.0 <= self.low_frac && self.low_frac <= self.high_frac && self.high_frac <= 1.0) {
            return bad("need 0 <= low <= high <= 1");
        }
        if self.cap == 0 {
            return bad("cap must be positive");
        }
        check_fraction(self.fallback_fraction)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Edge map (row-major booleans) from Gaussian smoothing, Sobel gradients,
/// four-direction non-maximum suppression and 8-connected hysteresis.
pub fn canny_edges(img: &Image, params: &CannyParams) -> Vec<bool> {
    let gray = to_grayscale(img);
    let smooth = separable_blur(&gray, &gaussian_kernel(params.sigma));
    let (h, w) = smooth.dims();
    let at = |r: isize, c: isize| {
        smooth.get(
            r.clamp(0, h as isize - 1) as usize,
            c.clamp(0, w as isize - 1) as usize,
            0,
        )
    };

    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut mag = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let dx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let dy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            let i = r as usize * w + c as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
        }
    }
    let max_mag = mag.iter().copied().fold(0.0, f64::max);
    if max_mag <= 1e-12 {
        return vec![false; h * w];
    }

    // Non-maximum suppression; border pixels are never edges.
    let mut thin = vec![0.0; h * w];
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let i = r * w + c;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dr, dc): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let fwd = mag[(r as isize + dr) as usize * w + (c as isize + dc) as usize];
            let back = mag[(r as isize - dr) as usize * w + (c as isize - dc) as usize];
            if m > fwd && m >= back {
                thin[i] = m;
            }
        }
    }

    let high = params.high_frac * max_mag;
    let low = params.low_frac * max_mag;
    let mut edges = vec![false; h * w];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high && m > 0.0 {
            edges[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if !edges[j] && thin[j] >= low && thin[j] > 0.0 {
                    edges[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edges
}

/// Edge pixels of the (fixed) level image, capped at `params.cap` by a
/// seeded uniform subsample; falls back to a random draw when fewer than
/// `params.min_edges` edges are found.
pub fn canny_sample<R: Rng + ?Sized>(
    level: usize,
    img: &Image,
    params: &CannyParams,
    rng: &mut R,
) -> Result<SampleSet, SamplerError> {
    params.validate()?;
    let edges = canny_edges(img, params);
    let w = img.width();
    let flat: Vec<usize> = (0..edges.len()).filter(|&i| edges[i]).collect();
    if flat.len() < params.min_edges {
        let mut set = random_sample(level, img.dims(), params.fallback_fraction, rng)?;
        set.origin = SampleOrigin::Fallback;
        return Ok(set);
    }
    let indices = if flat.len() > params.cap {
        to_rc(
            rand::seq::index::sample(rng, flat.len(), params.cap).into_iter().map(|k| flat[k]),
            w,
        )
    } else {
        to_rc(flat, w)
    };
    Ok(SampleSet {
        level,
        indices,
        origin: SampleOrigin::Edges,
    })
}
