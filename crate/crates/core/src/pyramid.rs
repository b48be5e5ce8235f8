//! Gaussian pyramid: binomial (1,4,6,4,1)/16 blur followed by keeping the
//! even rows and columns.

use thiserror::Error;

use crate::imageio::{Image, MIN_SIDE};

#[derive(Debug, Error, PartialEq)]
pub enum PyramidError {
    #[error("pyramid needs at least one level")]
    NoLevels,
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Convolve rows then columns with a symmetric kernel, replicating edges.
pub(crate) fn separable_blur(img: &Image, kernel: &[f64]) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let r = kernel.len() as isize / 2;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let cc = (col as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[(row * w + cc) * ch + c];
                }
                tmp[(row * w + col) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let rr = (row as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[(rr * w + col) * ch + c];
                }
                out[(row * w + col) * ch + c] = acc;
            }
        }
    }
    img.map_data(out)
}

pub fn gaussian_blur(img: &Image) -> Image {
    separable_blur(img, &BINOMIAL)
}

fn decimate(img: &Image) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut data = Vec::with_capacity(nh * nw * ch);
    for r in 0..nh {
        for c in 0..nw {
            data.extend_from_slice(img.pixel(2 * r, 2 * c));
        }
    }
    Image::new(nh, nw, ch, data).expect("decimated image is valid")
}

/// Levels `[finest, ..., coarsest]`; index 0 is the input image.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<Image>,
}

impl Pyramid {
    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    /// Level `l`, 1-based (level 1 is the native image).
    pub fn level(&self, l: usize) -> &Image {
        &self.levels[l - 1]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Number of levels actually buildable for an image of `dims` such that the
/// coarsest level stays at least 8×8.
pub fn max_levels(dims: (usize, usize)) -> usize {
    let (mut h, mut w) = dims;
    let mut n = 1;
    while h.div_ceil(2) >= MIN_SIDE && w.div_ceil(2) >= MIN_SIDE {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        n += 1;
    }
    n
}

pub fn build_pyramid(img: &Image, levels: usize) -> Result<Pyramid, PyramidError> {
    if levels == 0 {
        return Err(PyramidError::NoLevels);
    }
    let cap = max_levels(img.dims());
    let levels = if levels > cap {
        log::warn!(
            "{levels} pyramid levels requested for a {}x{} image; using {cap}",
            img.height(),
            img.width()
        );
        cap
    } else {
        levels
    };
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = decimate(&gaussian_blur(out.last().unwrap()));
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}
