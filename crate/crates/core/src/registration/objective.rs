//! Multi-level objective: one metric term per pyramid level, summed.
//!
//! Level 1 is warped with the finest transform `H₁ = T(v + v¹)`, every
//! coarser level with `H = T(v)`. Samples whose warped position leaves
//! `[-1, 1]²` are dropped pairwise before the metric is evaluated.

use rand::Rng;

use super::{Metric, RegistrationError, Result};
use crate::autodiff::{Tape, Tensor, Var};
use crate::imageio::{pixel_to_normalized, Image};
use crate::lie_affine::apply_var;
use crate::mine::{dv_bound, NetVars};
use crate::pyramid::Pyramid;
use crate::sampler::SampleSet;
use crate::warp::sample_var;

/// Sampled fixed-image locations of one level with their intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBatch {
    /// 1-based pyramid level.
    pub level: usize,
    pub points: Vec<[f64; 2]>,
    /// N×C_fixed, row-major.
    pub fixed_values: Vec<f64>,
}

impl LevelBatch {
    pub fn from_samples(fixed: &Image, set: &SampleSet) -> Self {
        let (h, w) = fixed.dims();
        let mut points = Vec::with_capacity(set.len());
        let mut fixed_values = Vec::with_capacity(set.len() * fixed.channels());
        for &(r, c) in &set.indices {
            let (x, y) = pixel_to_normalized(c as f64, r as f64, h, w);
            points.push([x, y]);
            fixed_values.extend_from_slice(fixed.pixel(r, c));
        }
        Self {
            level: set.level,
            points,
            fixed_values,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Metric-specific state for one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Critic<'a> {
    Mine(&'a NetVars),
    Mse,
    Ncc,
}

impl Critic<'_> {
    pub fn metric(&self) -> Metric {
        match self {
            Critic::Mine(_) => Metric::Mine,
            Critic::Mse => Metric::Mse,
            Critic::Ncc => Metric::Ncc,
        }
    }
}

/// The transforms entering the objective, as 3×3 tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LevelTransforms {
    pub finest: Var,
    pub coarse: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveValue {
    pub total: Var,
    pub levels_used: usize,
}

fn rows_of(values: &[f64], cols: usize, keep: &[usize]) -> Vec<f64> {
    keep.iter()
        .flat_map(|&i| values[i * cols..(i + 1) * cols].iter().copied())
        .collect()
}

fn mse_term(tape: &mut Tape, fixed: Var, moving: Var) -> Result<Var> {
    let d = tape.sub(fixed, moving)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean(sq)?;
    Ok(tape.scalar_mul(m, -1.0)?)
}

/// Per-channel mean-removed correlation over all channels; `None` when
/// either side has no variance.
fn ncc_term(tape: &mut Tape, fixed: &[f64], moving: Var, n: usize, c: usize) -> Result<Option<Var>> {
    let mut centered = fixed.to_vec();
    for ch in 0..c {
        let mean = (0..n).map(|i| fixed[i * c + ch]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * c + ch] -= mean;
        }
    }
    let fixed_energy: f64 = centered.iter().map(|x| x * x).sum();
    let moving_vals = tape.value(moving).data();
    let moving_energy: f64 = (0..c)
        .map(|ch| {
            let mean = (0..n).map(|i| moving_vals[i * c + ch]).sum::<f64>() / n as f64;
            (0..n).map(|i| (moving_vals[i * c + ch] - mean).powi(2)).sum::<f64>()
        })
        .sum();
    if fixed_energy <= 1e-300 || moving_energy <= 1e-300 {
        return Ok(None);
    }
    let avg = tape.constant(Tensor::filled(vec![1, n], 1.0 / n as f64))?;
    let ones = tape.constant(Tensor::filled(vec![n, 1], 1.0))?;
    let means = tape.matmul(avg, moving)?;
    let spread = tape.matmul(ones, means)?;
    let mc = tape.sub(moving, spread)?;
    let fc = tape.constant(Tensor::matrix(n, c, centered)?)?;
    let prod = tape.mul(fc, mc)?;
    let num = tape.sum(prod)?;
    let sq = tape.mul(mc, mc)?;
    let energy = tape.sum(sq)?;
    let log_e = tape.log(energy)?;
    let half = tape.scalar_mul(log_e, -0.5)?;
    let inv_norm = tape.exp(half)?;
    let ratio = tape.mul(num, inv_norm)?;
    Ok(Some(tape.scalar_mul(ratio, 1.0 / fixed_energy.sqrt())?))
}

/// Sum of per-level metric terms. Levels with fewer than two in-bounds
/// samples are skipped; if every level is skipped the call fails.
pub fn objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    fixed: &Pyramid,
    moving: &Pyramid,
    batches: &[LevelBatch],
    transforms: LevelTransforms,
    critic: Critic<'_>,
    rng: &mut R,
) -> Result<ObjectiveValue> {
    let mut total: Option<Var> = None;
    let mut used = 0;
    for batch in batches {
        let l = batch.level;
        let h = if l == 1 {
            transforms.finest
        } else {
            transforms.coarse
        };
        let (fixed_img, moving_img) = (fixed.level(l), moving.level(l));
        let cf = fixed_img.channels();
        let cm = moving_img.channels();

        let warped_pts = apply_var(tape, h, &batch.points)?;
        let (values, valid) = sample_var(tape, moving_img, warped_pts)?;
        let keep: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        if keep.len() < 2 {
            log::warn!("level {l}: {} in-bounds samples, skipping", keep.len());
            continue;
        }
        let n = keep.len();
        let moving_vals = if n == valid.len() {
            values
        } else {
            tape.gather_rows(values, &keep)?
        };
        let fixed_rows = rows_of(&batch.fixed_values, cf, &keep);

        let term = match critic {
            Critic::Mine(net) => {
                let fv = tape.constant(Tensor::matrix(n, cf, fixed_rows)?)?;
                Some(dv_bound(tape, net, fv, moving_vals, rng)?)
            }
            Critic::Mse => {
                debug_assert_eq!(cf, cm);
                let fv = tape.constant(Tensor::matrix(n, cf, fixed_rows)?)?;
                Some(mse_term(tape, fv, moving_vals)?)
            }
            Critic::Ncc => {
                debug_assert_eq!(cf, cm);
                let t = ncc_term(tape, &fixed_rows, moving_vals, n, cf)?;
                if t.is_none() {
                    log::warn!("level {l}: zero variance in sampled intensities, skipping");
                }
                t
            }
        };
        if let Some(t) = term {
            total = Some(match total {
                None => t,
                Some(acc) => tape.add(acc, t)?,
            });
            used += 1;
        }
    }
    let total = total.ok_or(RegistrationError::NoOverlap)?;
    Ok(ObjectiveValue {
        total,
        levels_used: used,
    })
}
