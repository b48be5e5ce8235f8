//! Synthetic registration problems with a known similarity transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imageio::{normalized_to_pixel, Image, LandmarkPair, LandmarkSet, Parameterization, TransformRecord};
use crate::lie_affine::{mexp, AffineMatrix, LieParams};
use crate::warp::{warp_image, WarpError};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("{name} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error(transparent)]
    Warp(#[from] WarpError),
}

/// Rotation in degrees, translation in normalized units, isotropic scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub rot_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            rot_deg: 0.0,
            tx: 0.0,
            ty: 0.0,
            scale: 1.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let check = |name, value: f64, lo, hi| {
            if value.is_finite() && (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(SynthError::OutOfRange { name, value, lo, hi })
            }
        };
        check("rot", self.rot_deg, -30.0, 30.0)?;
        check("tx", self.tx, -0.2, 0.2)?;
        check("ty", self.ty, -0.2, 0.2)?;
        check("scale", self.scale, 0.8, 1.25)
    }

    /// Generator coefficients `v` with `mexp(v) = [sR | t]`.
    ///
    /// The linear part of the algebra element acts as the complex number
    /// `z = ln s + iθ`; its exponential maps a translation coefficient `c`
    /// to `(e^z − 1)/z · c`, which is inverted here.
    pub fn coefficients(&self) -> [f64; 6] {
        let (a, b) = (self.scale.ln(), self.rot_deg.to_radians());
        let (tx, ty) = (self.tx, self.ty);
        let (cx, cy) = if a.hypot(b) < 1e-12 {
            (tx, ty)
        } else {
            // w = e^z − 1
            let ea = a.exp();
            let (wr, wi) = (ea * b.cos() - 1.0, ea * b.sin());
            // c = τ·z / w
            let (nr, ni) = (tx * a - ty * b, tx * b + ty * a);
            let d = wr * wr + wi * wi;
            ((nr * wr + ni * wi) / d, (ni * wr - nr * wi) / d)
        };
        [cx, cy, b, a, 0.0, 0.0]
    }

    /// The fixed → moving transform.
    pub fn matrix(&self) -> AffineMatrix {
        mexp(&self.coefficients())
    }
}

/// Landmark grid in normalized coordinates: 4×4 points spanning ±0.4.
pub fn landmark_grid() -> Vec<[f64; 2]> {
    let ticks = [-0.4, -0.4 / 3.0, 0.4 / 3.0, 0.4];
    ticks
        .iter()
        .flat_map(|&y| ticks.iter().map(move |&x| [x, y]))
        .collect()
}

/// Pixel landmark pairs `(p, T·p)` on the grid.
pub fn synth_landmarks(t: &AffineMatrix, fixed_dims: (usize, usize), moving_dims: (usize, usize)) -> LandmarkSet {
    let pairs = landmark_grid()
        .into_iter()
        .map(|[x, y]| {
            let (xf, yf) = normalized_to_pixel(x, y, fixed_dims.0, fixed_dims.1);
            let (u, v) = t.apply_point(x, y);
            let (xm, ym) = normalized_to_pixel(u, v, moving_dims.0, moving_dims.1);
            LandmarkPair {
                x_fixed: xf,
                y_fixed: yf,
                x_moving: xm,
                y_moving: ym,
            }
        })
        .collect();
    LandmarkSet::new(pairs).expect("grid is non-empty")
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub moving: Image,
    pub landmarks: LandmarkSet,
    pub truth: TransformRecord,
}

/// Resample `fixed` so that `moving(T·p) = fixed(p)`.
pub fn synthesize(fixed: &Image, params: &SynthParams) -> Result<SynthPair, SynthError> {
    params.validate()?;
    let v = params.coefficients();
    let t = mexp(&v);
    let dims = fixed.dims();
    let inv = t.inverse().ok_or(WarpError::Singular(t.linear_det()))?;
    let moving = warp_image(fixed, &inv, dims)?;
    let truth = TransformRecord::new(LieParams { v, v1: [0.0; 6] }, Parameterization::Mexp, dims, dims);
    Ok(SynthPair {
        moving,
        landmarks: synth_landmarks(&t, dims, dims),
        truth,
    })
}

/// Smooth grayscale scene of Gaussian blobs and soft discs and bars.
pub fn test_pattern(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Blob {
        x: f64,
        y: f64,
        s: f64,
        a: f64,
    }
    let blobs: Vec<Blob> = (0..14)
        .map(|_| Blob {
            x: rng.random_range(-0.8..0.8),
            y: rng.random_range(-0.8..0.8),
            s: rng.random_range(0.05..0.2),
            a: rng.random_range(-0.5..0.6),
        })
        .collect();
    let discs: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.08..0.22),
                rng.random_range(-0.35..0.35),
            )
        })
        .collect();
    let soft = |d: f64| 1.0 / (1.0 + (-d / 0.015).exp());

    let raw: Vec<f64> = (0..height * width)
        .map(|i| {
            let (r, c) = (i / width, i % width);
            let x = 2.0 * (c as f64 + 0.5) / width as f64 - 1.0;
            let y = 2.0 * (r as f64 + 0.5) / height as f64 - 1.0;
            let mut v = 0.15 * (3.0 * x + 1.0).sin() * (2.0 * y).cos();
            for b in &blobs {
                v += b.a * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.s * b.s)).exp();
            }
            for &(cx, cy, rad, a) in &discs {
                v += a * soft(rad - (x - cx).hypot(y - cy));
            }
            v += 0.25 * soft(0.08 - (x + 0.2 * y - 0.1).abs()) * soft(0.6 - y.abs());
            v
        })
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    let data = raw.into_iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect();
    Image::new(height, width, 1, data).expect("values in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::naed;

    #[test]
    fn coefficients_reproduce_the_similarity() {
        let p = SynthParams {
            rot_deg: 5.0,
            tx: 0.05,
            ty: -0.03,
            scale: 1.03,
        };
        let m = p.matrix().rows();
        let (s, th) = (1.03, 5f64.to_radians());
        let expect = [[s * th.cos(), -s * th.sin(), 0.05], [s * th.sin(), s * th.cos(), -0.03]];
        for r in 0..2 {
            for c in 0..3 {
                assert!((m[r][c] - expect[r][c]).abs() < 1e-14, "{r}{c}");
            }
        }
    }

    #[test]
    fn identity_resample_is_exact() {
        let img = test_pattern(64, 64, 1);
        let pair = synthesize(&img, &SynthParams::default()).unwrap();
        assert_eq!(pair.moving, img);
    }

    #[test]
    fn translation_shifts_landmarks() {
        let img = test_pattern(64, 80, 2);
        let p = SynthParams {
            tx: 0.05,
            ..SynthParams::default()
        };
        let pair = synthesize(&img, &p).unwrap();
        assert!(pair.landmarks.len() >= 10);
        for lm in pair.landmarks.pairs() {
            assert!((lm.x_moving - lm.x_fixed - 0.05 * 40.0).abs() < 1e-12);
            assert_eq!(lm.y_moving, lm.y_fixed);
        }
        pair.truth.verify().unwrap();
        let id = naed(&pair.landmarks, &AffineMatrix::identity(), (64, 80), (64, 80)).unwrap();
        assert!((id.mean - 0.025).abs() < 1e-9);
        let t = naed(&pair.landmarks, &pair.truth.affine().unwrap(), (64, 80), (64, 80)).unwrap();
        assert!(t.mean < 1e-12);
    }

    #[test]
    fn moving_matches_fixed_along_the_transform() {
        let img = test_pattern(96, 96, 3);
        let p = SynthParams {
            rot_deg: -8.0,
            tx: 0.04,
            ty: 0.02,
            scale: 0.95,
        };
        let pair = synthesize(&img, &p).unwrap();
        let back = warp_image(&pair.moving, &p.matrix(), (96, 96)).unwrap();
        // interior pixels, away from the resampled border
        let mut worst: f64 = 0.0;
        for r in 24..72 {
            for c in 24..72 {
                worst = worst.max((back.get(r, c, 0) - img.get(r, c, 0)).abs());
            }
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn range_checks() {
        for p in [
            SynthParams { rot_deg: 31.0, ..Default::default() },
            SynthParams { tx: 0.3, ..Default::default() },
            SynthParams { ty: -0.21, ..Default::default() },
            SynthParams { scale: 0.7, ..Default::default() },
            SynthParams { scale: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(p.validate(), Err(SynthError::OutOfRange { .. })));
        }
    }

    #[test]
    fn pattern_is_deterministic_and_textured() {
        let a = test_pattern(128, 128, 7);
        assert_eq!(a, test_pattern(128, 128, 7));
        assert_ne!(a, test_pattern(128, 128, 8));
        let m = a.mean();
        let var = a.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / a.data().len() as f64;
        assert!(var > 0.005, "{var}");
    }
}
