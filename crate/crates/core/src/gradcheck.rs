//! Central finite-difference checks of every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Result, Tape, Tensor, Var};
use crate::imageio::Image;
use crate::lie_affine::{apply_var, direct_var, mexp_var};
use crate::mine::{dv_bound_with_permutation, log_mean_exp, mlp_forward, NetVars};
use crate::warp::sample_var;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MEXP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub name: &'static str,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckResult {
    pub fn pass(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs at once.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Scalar `Σ wᵢ·fᵢ(x)` of an arbitrary-shaped output with fixed weights, so
/// every output entry contributes.
fn weighted(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let w = tape.constant(Tensor::new(tape.shape(out).to_vec(), weights.data()[..tape.value(out).len()].to_vec())?)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Compare the tape gradient of `f` with central differences at `inputs`.
pub fn check<F>(name: &'static str, inputs: &[Tensor], tolerance: f64, f: F) -> Result<GradcheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights = Tensor::row((0..4096).map(|_| rng.random_range(-1.0..1.0)).collect());

    let eval = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let root = weighted(&mut tape, out, &weights)?;
        Ok((tape, vars, root))
    };

    let (tape, vars, root) = eval(inputs)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.get(v).into_data()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let x = inputs[k].data()[j];
            probe[k].data_mut()[j] = x + STEP;
            let (t, _, r) = eval(&probe)?;
            let up = t.value(r).item();
            probe[k].data_mut()[j] = x - STEP;
            let (t, _, r) = eval(&probe)?;
            let down = t.value(r).item();
            probe[k].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(GradcheckResult {
        name,
        rel_err: relative_error(&analytic, &numeric),
        tolerance,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Normalized points whose pixel-space positions stay clear of the grid
/// lines where bilinear interpolation has kinks.
fn smooth_points(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        for size in [w, h] {
            let px = loop {
                let px: f64 = rng.random_range(0.2..size as f64 - 1.2);
                let frac = px.fract();
                if (0.05..0.95).contains(&frac) {
                    break px;
                }
            };
            data.push(2.0 * (px + 0.5) / size as f64 - 1.0);
        }
    }
    Tensor::matrix(n, 2, data).expect("shape")
}

fn net_vars(v: &[Var]) -> NetVars {
    NetVars {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
        w3: v[4],
        b3: v[5],
    }
}

fn net_inputs(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize) -> Vec<Tensor> {
    vec![
        uniform(rng, &[hidden, d_in], -1.0, 1.0),
        uniform(rng, &[1, hidden], -0.5, 0.5),
        uniform(rng, &[hidden, hidden], -0.5, 0.5),
        uniform(rng, &[1, hidden], -0.5, 0.5),
        uniform(rng, &[1, hidden], -1.0, 1.0),
        uniform(rng, &[1, 1], -0.5, 0.5),
    ]
}

/// Textured RGB test image for the sampler.
fn sampler_image() -> Image {
    Image::from_fn(12, 16, 3, |r, c, ch| {
        let (x, y) = (c as f64, r as f64);
        0.5 + 0.3 * (0.7 * x + 0.4 * y + ch as f64).sin() * (0.3 * y).cos()
    })
    .expect("in range")
}

/// Every check in the suite, run on random inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let tol = TOLERANCE;

    let (a, b) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0));
    out.push(check("add", &[a.clone(), b.clone()], tol, |t, v| t.add(v[0], v[1]))?);
    out.push(check("sub", &[a.clone(), b.clone()], tol, |t, v| t.sub(v[0], v[1]))?);
    out.push(check("mul", &[a.clone(), b.clone()], tol, |t, v| t.mul(v[0], v[1]))?);
    let c = uniform(r, &[4, 5], -1.0, 1.0);
    out.push(check("matmul", &[a.clone(), c], tol, |t, v| t.matmul(v[0], v[1]))?);
    out.push(check("transpose", &[a.clone()], tol, |t, v| t.transpose(v[0]))?);
    out.push(check("reshape", &[a.clone()], tol, |t, v| t.reshape(v[0], vec![2, 6]))?);
    out.push(check("relu", &[away_from_zero(r, &[3, 4], 0.01)], tol, |t, v| t.relu(v[0]))?);
    out.push(check("exp", &[a.clone()], tol, |t, v| t.exp(v[0]))?);
    out.push(check("log", &[uniform(r, &[3, 4], 0.2, 2.0)], tol, |t, v| t.log(v[0]))?);
    out.push(check("sum", &[a.clone()], tol, |t, v| t.sum(v[0]))?);
    out.push(check("mean", &[a.clone()], tol, |t, v| t.mean(v[0]))?);
    out.push(check("max", &[a.clone()], tol, |t, v| t.max_reduce(v[0]))?);
    out.push(check("gather_rows", &[a.clone()], tol, |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]))?);
    out.push(check("scalar_mul", &[a.clone()], tol, |t, v| t.scalar_mul(v[0], -1.7))?);
    out.push(check("add_scalar", &[a.clone()], tol, |t, v| t.add_scalar(v[0], 0.3))?);
    let row = uniform(r, &[1, 4], -1.0, 1.0);
    out.push(check("add_row", &[a.clone(), row], tol, |t, v| t.add_row(v[0], v[1]))?);
    let d = uniform(r, &[3, 2], -1.0, 1.0);
    out.push(check("concat_cols", &[a.clone(), d], tol, |t, v| t.concat_cols(v[0], v[1]))?);
    out.push(check("log_mean_exp", &[uniform(r, &[6, 1], -3.0, 3.0)], tol, |t, v| {
        Ok(log_mean_exp(t, v[0]).expect("finite"))
    })?);

    let mut mlp_in = net_inputs(r, 2, 8);
    mlp_in.push(uniform(r, &[5, 2], -1.0, 1.0));
    out.push(check("mlp", &mlp_in, tol, |t, v| {
        Ok(mlp_forward(t, &net_vars(v), v[6]).expect("widths agree"))
    })?);

    let mut dv_in = net_inputs(r, 2, 8);
    dv_in.push(uniform(r, &[6, 1], 0.0, 1.0));
    dv_in.push(uniform(r, &[6, 1], 0.0, 1.0));
    let perm = [3, 0, 5, 1, 4, 2];
    out.push(check("dv_bound", &dv_in, tol, |t, v| {
        Ok(dv_bound_with_permutation(t, &net_vars(v), v[6], v[7], &perm).expect("valid inputs"))
    })?);

    let coeffs = {
        let raw = uniform(r, &[1, 6], -1.0, 1.0);
        let l1: f64 = raw.data().iter().map(|x| x.abs()).sum();
        Tensor::row(raw.data().iter().map(|x| 0.9 * x / l1).collect())
    };
    out.push(check("mexp", &[coeffs], MEXP_TOLERANCE, |t, v| mexp_var(t, v[0]))?);
    out.push(check("direct", &[uniform(r, &[1, 6], -1.0, 1.0)], tol, |t, v| direct_var(t, v[0]))?);
    let pts: Vec<[f64; 2]> = (0..5).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
    let h = {
        let mut m = uniform(r, &[3, 3], -1.0, 1.0);
        m.data_mut()[6..].copy_from_slice(&[0.0, 0.0, 1.0]);
        m
    };
    out.push(check("apply", &[h], tol, move |t, v| apply_var(t, v[0], &pts))?);

    let img = sampler_image();
    let spts = smooth_points(r, 20, img.height(), img.width());
    out.push(check("sampler", &[spts], tol, |t, v| Ok(sample_var(t, &img, v[0])?.0))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_norm_based() {
        assert_eq!(relative_error(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn detects_a_detached_path() {
        // a constant copy of the input hides the dependence from the tape
        let a = Tensor::row(vec![0.3, -0.2]);
        let r = check("detached", &[a.clone()], TOLERANCE, |t, v| {
            let c = t.constant(t.value(v[0]).clone())?;
            t.mul(c, c)
        })
        .unwrap();
        assert!((r.rel_err - 1.0).abs() < 1e-9);
        assert!(!r.pass());
        let r = check("square", &[a], TOLERANCE, |t, v| t.mul(v[0], v[0])).unwrap();
        assert!(r.pass());
    }

    #[test]
    fn full_suite_passes() {
        for res in run_suite(1).unwrap() {
            assert!(res.pass(), "{}: {}", res.name, res.rel_err);
        }
    }
}
