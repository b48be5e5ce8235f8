use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImageError, Result};
use crate::lie_affine::{AffineMatrix, LieParams};
pub use crate::lie_affine::Parameterization;

/// Tolerance for the matrix-vs-parameters check on read.
pub const CONSISTENCY_TOL: f64 = 1e-9;

/// Final registration transform: maps fixed-image normalized coordinates to
/// moving-image normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub matrix: [[f64; 3]; 3],
    pub v: [f64; 6],
    pub v1: [f64; 6],
    pub coord_space: String,
    /// `[height, width]`.
    pub fixed_size: [usize; 2],
    /// `[height, width]`.
    pub moving_size: [usize; 2],
    #[serde(default, skip_serializing_if = "is_mexp")]
    pub parameterization: Parameterization,
}

fn is_mexp(p: &Parameterization) -> bool {
    *p == Parameterization::Mexp
}

impl TransformRecord {
    pub fn new(
        params: LieParams,
        parameterization: Parameterization,
        fixed_size: (usize, usize),
        moving_size: (usize, usize),
    ) -> Self {
        Self {
            matrix: parameterization.matrix(&params.combined()).rows(),
            v: params.v,
            v1: params.v1,
            coord_space: "normalized".into(),
            fixed_size: [fixed_size.0, fixed_size.1],
            moving_size: [moving_size.0, moving_size.1],
            parameterization,
        }
    }

    pub fn params(&self) -> LieParams {
        LieParams {
            v: self.v,
            v1: self.v1,
        }
    }

    pub fn affine(&self) -> Result<AffineMatrix> {
        AffineMatrix::from_rows(self.matrix)
            .ok_or_else(|| ImageError::Transform("bottom row must be (0, 0, 1)".into()))
    }

    /// Largest entrywise gap between the stored matrix and the one implied
    /// by `v + v1`.
    pub fn inconsistency(&self) -> f64 {
        let implied = self.parameterization.matrix(&self.params().combined()).rows();
        implied
            .iter()
            .flatten()
            .zip(self.matrix.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn verify(&self) -> Result<()> {
        if self.coord_space != "normalized" {
            return Err(ImageError::Transform(format!(
                "unsupported coord_space {:?}",
                self.coord_space
            )));
        }
        self.affine()?;
        let gap = self.inconsistency();
        if !(gap <= CONSISTENCY_TOL) {
            return Err(ImageError::Inconsistent(gap));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Self =
            serde_json::from_str(text).map_err(|e| ImageError::Transform(e.to_string()))?;
        rec.verify()?;
        Ok(rec)
    }
}

pub fn read_transform(path: impl AsRef<Path>) -> Result<TransformRecord> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ImageError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    TransformRecord::from_json(&text)
}

pub fn write_transform(rec: &TransformRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, rec.to_json() + "\n").map_err(|e| ImageError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: [f64; 6], v1: [f64; 6]) -> TransformRecord {
        TransformRecord::new(LieParams { v, v1 }, Parameterization::Mexp, (32, 40), (30, 30))
    }

    #[test]
    fn zero_params_identity() {
        let r = rec([0.0; 6], [0.0; 6]);
        assert_eq!(r.matrix, [[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]]);
        r.verify().unwrap();
    }

    #[test]
    fn translation_row() {
        let r = rec([0.5, 0., 0., 0., 0., 0.], [0.0; 6]);
        assert_eq!(r.matrix[0], [1.0, 0.0, 0.5]);
    }

    #[test]
    fn tampered_matrix_rejected() {
        let mut r = rec([0.1, 0.0, 0.2, 0.0, 0.0, 0.0], [0.01; 6]);
        r.matrix[0][2] += 1e-6;
        let text = r.to_json();
        assert!(matches!(
            TransformRecord::from_json(&text),
            Err(ImageError::Inconsistent(_))
        ));
    }

    #[test]
    fn missing_field_rejected() {
        let text = r#"{"matrix": [[1,0,0],[0,1,0],[0,0,1]], "v": [0,0,0,0,0,0]}"#;
        assert!(matches!(
            TransformRecord::from_json(text),
            Err(ImageError::Transform(_))
        ));
    }

    #[test]
    fn json_keys_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let r = rec([0.013, -0.2, 0.1, 0.03, 0.0, 1e-7], [1e-3, 0., 0., 0., 0., -2e-4]);
        write_transform(&r, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["matrix", "v", "v1", "coord_space", "fixed_size", "moving_size"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(json.get("parameterization").is_none());
        assert_eq!(read_transform(&p).unwrap(), r);
    }

    #[test]
    fn direct_parameterization_round_trip() {
        let r = TransformRecord::new(
            LieParams {
                v: [1.01, 0.02, 0.05, -0.01, 0.99, 0.0],
                v1: [0.0; 6],
            },
            Parameterization::Direct,
            (16, 16),
            (16, 16),
        );
        let back = TransformRecord::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.matrix[0], [1.01, 0.02, 0.05]);
    }
}
