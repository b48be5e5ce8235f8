//! Bilinear sampling at normalized coordinates, differentiable with respect
//! to the sample positions.
//!
//! Transforms follow the fixed-frame convention: `H` maps a fixed-image
//! normalized point to the moving-image point whose value is sampled.

use thiserror::Error;

use crate::autodiff::{Result as AdResult, Tape, Tensor, Var};
use crate::imageio::{normalized_to_pixel, pixel_to_normalized, Image};
use crate::lie_affine::AffineMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum WarpError {
    #[error("transform is singular (linear determinant {0:e})")]
    Singular(f64),
}

/// Sampled values (N×C, row-major) and per-point validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn in_domain(x: f64, y: f64) -> bool {
    (-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y)
}

struct Axis {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel coordinate)/d(normalized coordinate), zero where clamped.
    slope: f64,
}

#[inline]
fn axis(norm: f64, size: usize) -> Axis {
    let p = (norm + 1.0) * size as f64 / 2.0 - 0.5;
    let max = (size - 1) as f64;
    let (pc, slope) = if p < 0.0 {
        (0.0, 0.0)
    } else if p > max {
        (max, 0.0)
    } else {
        (p, size as f64 / 2.0)
    };
    let i0 = (pc.floor() as usize).min(size.saturating_sub(2));
    let i1 = (i0 + 1).min(size - 1);
    Axis {
        i0,
        i1,
        frac: pc - i0 as f64,
        slope,
    }
}

/// Bilinear value of every channel at one point, plus `∂/∂x` and `∂/∂y`.
#[inline]
fn bilinear(img: &Image, x: f64, y: f64, out: &mut [f64], dx: &mut [f64], dy: &mut [f64]) {
    let ax = axis(x, img.width());
    let ay = axis(y, img.height());
    let (p00, p01) = (img.pixel(ay.i0, ax.i0), img.pixel(ay.i0, ax.i1));
    let (p10, p11) = (img.pixel(ay.i1, ax.i0), img.pixel(ay.i1, ax.i1));
    let (fx, fy) = (ax.frac, ay.frac);
    for c in 0..img.channels() {
        let top = p00[c] + fx * (p01[c] - p00[c]);
        let bot = p10[c] + fx * (p11[c] - p10[c]);
        out[c] = top + fy * (bot - top);
        dx[c] = ((1.0 - fy) * (p01[c] - p00[c]) + fy * (p11[c] - p10[c])) * ax.slope;
        dy[c] = (bot - top) * ay.slope;
    }
}

/// Edge-clamped bilinear samples; points outside `[-1, 1]²` are flagged
/// invalid but still receive the clamped value.
pub fn sample(img: &Image, pts: &[[f64; 2]]) -> Samples {
    let c = img.channels();
    let mut values = vec![0.0; pts.len() * c];
    let (mut dx, mut dy) = (vec![0.0; c], vec![0.0; c]);
    let mut valid = Vec::with_capacity(pts.len());
    for (i, &[x, y]) in pts.iter().enumerate() {
        bilinear(img, x, y, &mut values[i * c..(i + 1) * c], &mut dx, &mut dy);
        valid.push(in_domain(x, y));
    }
    Samples { values, valid }
}

/// Tape version of [`sample`]; `pts` is N×2 and the result N×C.
pub fn sample_var(tape: &mut Tape, img: &Image, pts: Var) -> AdResult<(Var, Vec<bool>)> {
    let c = img.channels();
    let p = tape.value(pts);
    let (n, _) = p.dims2("sample")?;
    let coords = p.data();
    let mut values = vec![0.0; n * c];
    let mut jac = vec![0.0; n * c * 2];
    let mut valid = Vec::with_capacity(n);
    let (mut dx, mut dy) = (vec![0.0; c], vec![0.0; c]);
    for i in 0..n {
        let (x, y) = (coords[2 * i], coords[2 * i + 1]);
        bilinear(img, x, y, &mut values[i * c..(i + 1) * c], &mut dx, &mut dy);
        for ch in 0..c {
            jac[(i * c + ch) * 2] = dx[ch];
            jac[(i * c + ch) * 2 + 1] = dy[ch];
        }
        valid.push(in_domain(x, y));
    }
    let out = tape.row_map(pts, Tensor::matrix(n, c, values)?, jac)?;
    Ok((out, valid))
}

/// Normalized coordinates of every pixel center, row-major.
pub fn pixel_grid(height: usize, width: usize) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (x, y) = pixel_to_normalized(c as f64, r as f64, height, width);
            pts.push([x, y]);
        }
    }
    pts
}

/// Render `img` in the fixed frame: `out(p) = img(H·p)` for every output
/// pixel center `p`; samples falling outside the moving image are 0.
pub fn warp_image(img: &Image, h: &AffineMatrix, out_dims: (usize, usize)) -> Result<Image, WarpError> {
    if !h.is_invertible() {
        return Err(WarpError::Singular(h.linear_det()));
    }
    let (oh, ow) = out_dims;
    let pts = h.apply(&pixel_grid(oh, ow));
    let s = sample(img, &pts);
    let c = img.channels();
    let mut data = s.values;
    for (i, ok) in s.valid.iter().enumerate() {
        if !ok {
            data[i * c..(i + 1) * c].fill(0.0);
        }
    }
    Ok(Image::new(oh, ow, c, data).expect("bilinear output stays in range"))
}

/// Pixel position in the moving image of a fixed-image pixel.
pub fn map_pixel(
    h: &AffineMatrix,
    col: f64,
    row: f64,
    fixed_dims: (usize, usize),
    moving_dims: (usize, usize),
) -> (f64, f64) {
    // skip the round trip through normalized coordinates, which is inexact
    if fixed_dims == moving_dims && *h == AffineMatrix::identity() {
        return (col, row);
    }
    let (x, y) = pixel_to_normalized(col, row, fixed_dims.0, fixed_dims.1);
    let (u, v) = h.apply_point(x, y);
    normalized_to_pixel(u, v, moving_dims.0, moving_dims.1)
}
