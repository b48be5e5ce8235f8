use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImageError, Result};

/// Corresponding points in pixel coordinates (column `x`, row `y`) of the
/// fixed and moving images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPair {
    pub x_fixed: f64,
    pub y_fixed: f64,
    pub x_moving: f64,
    pub y_moving: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pairs: Vec<LandmarkPair>,
}

impl LandmarkSet {
    pub fn new(pairs: Vec<LandmarkPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(ImageError::NoLandmarks);
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[LandmarkPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Log a warning for every point outside its image; `dims` are `(height, width)`.
    pub fn warn_out_of_bounds(&self, fixed: (usize, usize), moving: (usize, usize)) -> usize {
        let inside = |x: f64, y: f64, (h, w): (usize, usize)| {
            x >= -0.5 && y >= -0.5 && x <= w as f64 - 0.5 && y <= h as f64 - 0.5
        };
        let mut n = 0;
        for (i, p) in self.pairs.iter().enumerate() {
            if !inside(p.x_fixed, p.y_fixed, fixed) || !inside(p.x_moving, p.y_moving, moving) {
                log::warn!("landmark {i} lies outside its image bounds");
                n += 1;
            }
        }
        n
    }
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let err = |msg: String| ImageError::Landmarks {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x_fixed", "y_fixed", "x_moving", "y_moving"] {
        return Err(err(format!("unexpected header {headers:?}")));
    }
    let pairs = reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| err(format!("row {}: {e}", i + 1))))
        .collect::<Result<Vec<LandmarkPair>>>()?;
    LandmarkSet::new(pairs)
}

pub fn write_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| ImageError::Landmarks {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(path).map_err(err)?;
    for p in &set.pairs {
        writer.serialize(p).map_err(err)?;
    }
    writer.flush().map_err(|e| ImageError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
