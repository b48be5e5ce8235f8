//! Affine transforms as exponentials of the six Aff(2) generators.
//!
//! `mexp(c) = Σ_{n=0}^{10} Bⁿ/n!` with `B = Σ cᵢ Bᵢ`. Every generator has a
//! zero bottom row, so every power `Bⁿ` (n ≥ 1) does too and the result's
//! bottom row is exactly `(0, 0, 1)`.

use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Result as AdResult, Tape, Tensor, Var};

/// Translation x, translation y, rotation, isotropic scale, stretch, shear.
pub const GENERATORS: [[[f64; 3]; 3]; 6] = [
    [[0., 0., 1.], [0., 0., 0.], [0., 0., 0.]],
    [[0., 0., 0.], [0., 0., 1.], [0., 0., 0.]],
    [[0., -1., 0.], [1., 0., 0.], [0., 0., 0.]],
    [[1., 0., 0.], [0., 1., 0.], [0., 0., 0.]],
    [[1., 0., 0.], [0., -1., 0.], [0., 0., 0.]],
    [[0., 1., 0.], [1., 0., 0.], [0., 0., 0.]],
];

/// Highest power kept in the truncated series.
pub const SERIES_ORDER: usize = 10;

/// How six parameters become a transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Coefficients of the Aff(2) generators, exponentiated.
    #[default]
    Mexp,
    /// The top two matrix rows themselves.
    Direct,
}

impl Parameterization {
    /// Parameter vector of the identity transform.
    pub fn identity_params(self) -> [f64; 6] {
        match self {
            Parameterization::Mexp => [0.0; 6],
            Parameterization::Direct => [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn matrix(self, params: &[f64; 6]) -> AffineMatrix {
        match self {
            Parameterization::Mexp => mexp(params),
            Parameterization::Direct => direct_matrix(params),
        }
    }

    /// Differentiable counterpart of [`Parameterization::matrix`]; `params` is 1×6.
    pub fn matrix_var(self, tape: &mut Tape, params: Var) -> AdResult<Var> {
        match self {
            Parameterization::Mexp => mexp_var(tape, params),
            Parameterization::Direct => direct_var(tape, params),
        }
    }
}

/// 3×3 homogeneous transform with bottom row `(0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix(Matrix3<f64>);

impl AffineMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Returns `None` unless the bottom row is exactly `(0, 0, 1)`.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Option<Self> {
        if rows[2] != [0.0, 0.0, 1.0] || rows.iter().flatten().any(|x| !x.is_finite()) {
            return None;
        }
        Some(Self(Matrix3::from_fn(|r, c| rows[r][c])))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Determinant of the linear (upper-left 2×2) part.
    pub fn linear_det(&self) -> f64 {
        Matrix2::new(self.0[(0, 0)], self.0[(0, 1)], self.0[(1, 0)], self.0[(1, 1)]).determinant()
    }

    pub fn is_invertible(&self) -> bool {
        self.linear_det().abs() > 1e-12
    }

    pub fn inverse(&self) -> Option<Self> {
        if !self.is_invertible() {
            return None;
        }
        let inv = self.0.try_inverse()?;
        let mut rows = AffineMatrix(inv).rows();
        rows[2] = [0.0, 0.0, 1.0];
        Self::from_rows(rows)
    }

    pub fn compose(&self, rhs: &AffineMatrix) -> AffineMatrix {
        let mut rows = AffineMatrix(self.0 * rhs.0).rows();
        rows[2] = [0.0, 0.0, 1.0];
        AffineMatrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    /// Max-abs entrywise distance.
    pub fn max_abs_diff(&self, other: &AffineMatrix) -> f64 {
        (self.0 - other.0).abs().max()
    }

    #[inline]
    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0 * Vector3::new(x, y, 1.0);
        (p[0], p[1])
    }

    /// Map normalized points; no perspective division is needed.
    pub fn apply(&self, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        pts.iter()
            .map(|&[x, y]| {
                let (u, v) = self.apply_point(x, y);
                [u, v]
            })
            .collect()
    }
}

/// `Σ cᵢ Bᵢ`.
pub fn algebra_element(coeffs: &[f64; 6]) -> Matrix3<f64> {
    let mut b = Matrix3::zeros();
    for (c, g) in coeffs.iter().zip(&GENERATORS) {
        b += Matrix3::from_fn(|r, k| g[r][k]) * *c;
    }
    b
}

/// Truncated series `Σ_{n=0}^{10} Bⁿ/n!`, Horner form.
pub fn mexp(coeffs: &[f64; 6]) -> AffineMatrix {
    let b = algebra_element(coeffs);
    let eye = Matrix3::identity();
    let mut s = eye;
    for k in (1..=SERIES_ORDER).rev() {
        s = eye + (b * s) * (1.0 / k as f64);
    }
    AffineMatrix(s)
}

/// Scaling-and-squaring reference: 30-term series on `B/2ᵏ` with
/// `‖B/2ᵏ‖₁ ≤ 0.5`, then `k` squarings.
pub fn mexp_oracle(coeffs: &[f64; 6]) -> AffineMatrix {
    let b = algebra_element(coeffs);
    let norm1 = (0..3)
        .map(|c| (0..3).map(|r| b[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut k = 0;
    while norm1 / 2f64.powi(k) > 0.5 {
        k += 1;
    }
    let scaled = b / 2f64.powi(k);
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for n in 1..=30 {
        term = term * scaled / n as f64;
        sum += term;
    }
    for _ in 0..k {
        sum = sum * sum;
    }
    for c in 0..3 {
        sum[(2, c)] = if c == 2 { 1.0 } else { 0.0 };
    }
    AffineMatrix(sum)
}

/// `[[θ₁, θ₂, θ₃], [θ₄, θ₅, θ₆], [0, 0, 1]]`.
pub fn direct_matrix(theta: &[f64; 6]) -> AffineMatrix {
    AffineMatrix(Matrix3::new(
        theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], 0.0, 0.0, 1.0,
    ))
}

/// Coarse parameters `v` and the finest-level correction `v1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LieParams {
    pub v: [f64; 6],
    pub v1: [f64; 6],
}

impl LieParams {
    pub fn combined(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.v[i] + self.v1[i])
    }
}

/// Transform used at pyramid `level` (1 = finest): `mexp(v + v1)` at level
/// 1, `mexp(v)` above it.
pub fn compose_params(p: &LieParams, level: usize) -> AffineMatrix {
    compose_params_with(p, level, Parameterization::Mexp)
}

pub fn compose_params_with(p: &LieParams, level: usize, param: Parameterization) -> AffineMatrix {
    assert!(level >= 1, "pyramid levels are 1-based");
    if level == 1 {
        param.matrix(&p.combined())
    } else {
        param.matrix(&p.v)
    }
}

fn generator_table() -> Tensor {
    let data = GENERATORS.iter().flatten().flatten().copied().collect();
    Tensor::matrix(6, 9, data).expect("6x9")
}

/// Tape version of [`mexp`]; `coeffs` is 1×6, the result 3×3.
pub fn mexp_var(tape: &mut Tape, coeffs: Var) -> AdResult<Var> {
    let g = tape.constant(generator_table())?;
    let flat = tape.matmul(coeffs, g)?;
    let b = tape.reshape(flat, vec![3, 3])?;
    let eye = tape.constant(Tensor::eye(3))?;
    let mut s = eye;
    for k in (1..=SERIES_ORDER).rev() {
        let bs = tape.matmul(b, s)?;
        let scaled = tape.scalar_mul(bs, 1.0 / k as f64)?;
        s = tape.add(eye, scaled)?;
    }
    Ok(s)
}

/// Tape version of [`direct_matrix`]; `theta` is 1×6, the result 3×3.
pub fn direct_var(tape: &mut Tape, theta: Var) -> AdResult<Var> {
    // 6 → 9 entry selector, bottom row added as a constant
    let mut sel = vec![0.0; 54];
    for i in 0..6 {
        sel[i * 9 + i] = 1.0;
    }
    let sel = tape.constant(Tensor::matrix(6, 9, sel)?)?;
    let flat = tape.matmul(theta, sel)?;
    let mut bottom = vec![0.0; 9];
    bottom[8] = 1.0;
    let bottom = tape.constant(Tensor::row(bottom))?;
    let full = tape.add(flat, bottom)?;
    tape.reshape(full, vec![3, 3])
}

/// Map constant normalized points through a 3×3 transform on the tape.
/// Returns an N×2 variable.
pub fn apply_var(tape: &mut Tape, h: Var, pts: &[[f64; 2]]) -> AdResult<Var> {
    let homog: Vec<f64> = pts.iter().flat_map(|&[x, y]| [x, y, 1.0]).collect();
    let x = tape.constant(Tensor::matrix(pts.len(), 3, homog)?)?;
    let ht = tape.transpose(h)?;
    let sel = tape.constant(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 0., 0.])?)?;
    let k = tape.matmul(ht, sel)?;
    tape.matmul(x, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotation(theta: f64) -> AffineMatrix {
        let (s, c) = theta.sin_cos();
        AffineMatrix::from_rows([[c, -s, 0.], [s, c, 0.], [0., 0., 1.]]).unwrap()
    }

    #[test]
    fn zero_is_identity_exactly() {
        assert_eq!(mexp(&[0.0; 6]), AffineMatrix::identity());
        assert_eq!(mexp_oracle(&[0.0; 6]), AffineMatrix::identity());
    }

    #[test]
    fn translation_series_terminates() {
        let m = mexp(&[0.5, 0., 0., 0., 0., 0.]);
        assert_eq!(m.rows(), [[1., 0., 0.5], [0., 1., 0.], [0., 0., 1.]]);
    }

    #[test]
    fn rotation_closed_form() {
        let m = mexp(&[0., 0., 0.5, 0., 0., 0.]);
        assert!(m.max_abs_diff(&rotation(0.5)) < 1e-10);
        let o = mexp_oracle(&[0., 0., 2.0, 0., 0., 0.]);
        assert!(o.max_abs_diff(&rotation(2.0)) < 1e-12);
    }

    #[test]
    fn generators_linearly_independent() {
        // Top-two-row entries of the six generators form a 6×6 matrix.
        let m = nalgebra::DMatrix::from_fn(6, 6, |i, j| GENERATORS[i][j / 3][j % 3]);
        assert!(m.determinant().abs() > 1e-9);
        assert!(GENERATORS.iter().all(|g| g[2] == [0.0; 3]));
    }

    #[test]
    fn determinant_is_exp_trace() {
        let c = [0.1, -0.2, 0.3, 0.15, -0.1, 0.05];
        let m = mexp(&c);
        assert!((m.linear_det() - (2.0 * c[3]).exp()).abs() < 1e-8);
    }

    #[test]
    fn exponential_of_sum_does_not_factor() {
        let p = LieParams {
            v: [0.1, 0.0, 0.3, 0.0, 0.2, 0.0],
            v1: [0.0, 0.05, 0.0, 0.1, 0.0, 0.15],
        };
        let h1 = compose_params(&p, 1);
        assert!(h1.max_abs_diff(&mexp(&p.combined())) < 1e-15);
        let product = mexp(&p.v).compose(&mexp(&p.v1));
        assert!(h1.max_abs_diff(&product) > 1e-6);
    }

    #[test]
    fn levels_share_v_when_v1_is_zero() {
        let p = LieParams {
            v: [0.02, 0.0, 0.1, 0.0, 0.01, 0.0],
            v1: [0.0; 6],
        };
        assert_eq!(compose_params(&p, 1), compose_params(&p, 2));
        assert_eq!(compose_params(&p, 2), compose_params(&p, 5));
        let zero = LieParams::default();
        assert_eq!(compose_params(&zero, 3), AffineMatrix::identity());
    }

    #[test]
    fn apply_examples() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [-0.3, 0.7]];
        assert_eq!(AffineMatrix::identity().apply(&pts), pts.to_vec());
        let t = mexp(&[0.5, 0., 0., 0., 0., 0.]);
        assert_eq!(t.apply(&pts)[0], [0.5, 0.0]);
        let r = mexp(&[0., 0., std::f64::consts::FRAC_PI_2, 0., 0., 0.]);
        let q = r.apply(&pts)[1];
        // (π/2)^11/11! ≈ 3.6e-6 truncation residual
        assert!(q[0].abs() < 1e-5 && (q[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tape_mexp_matches_plain() {
        let c = [0.03, -0.02, 0.2, 0.05, -0.04, 0.01];
        let mut tape = Tape::new();
        let cv = tape.param(Tensor::row(c.to_vec())).unwrap();
        let h = mexp_var(&mut tape, cv).unwrap();
        let plain = mexp(&c).rows();
        for (a, b) in tape.value(h).data().iter().zip(plain.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(&tape.value(h).data()[6..], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn tape_direct_and_apply() {
        let th = [1.1, 0.1, 0.2, -0.1, 0.9, -0.3];
        let mut tape = Tape::new();
        let tv = tape.param(Tensor::row(th.to_vec())).unwrap();
        let h = direct_var(&mut tape, tv).unwrap();
        let pts = [[0.5, -0.25], [0.0, 1.0]];
        let p = apply_var(&mut tape, h, &pts).unwrap();
        let expect = direct_matrix(&th).apply(&pts);
        for (a, b) in tape.value(p).data().iter().zip(expect.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let m = mexp(&[0.1, 0.2, 0.3, -0.1, 0.05, 0.02]);
        let i = m.inverse().unwrap();
        assert!(m.compose(&i).max_abs_diff(&AffineMatrix::identity()) < 1e-12);
        assert!(direct_matrix(&[0.0; 6]).inverse().is_none());
    }
}
