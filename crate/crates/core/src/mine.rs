//! MINEnet critic and the Donsker–Varadhan lower bound on mutual
//! information:
//!
//! `J(f) = mean_i f(p_i, q_i) − log mean_i exp f(p_i, q_s(i))`
//!
//! where `s` is a fresh uniform permutation that breaks the pairing and so
//! samples the product of marginals.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::registration::adam::{AdamState, OptimError};

/// Width of both hidden layers.
pub const HIDDEN: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum MineError {
    #[error("network expects {expected} input columns, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("DV bound needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("joint sample blocks have different row counts: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, MineError>;

/// `relu(relu(X·W₁ᵀ + b₁)·W₂ᵀ + b₂)·W₃ᵀ + b₃`.
#[derive(Debug, Clone, PartialEq)]
pub struct MineNetwork {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

/// The network's parameters as trainable tape variables.
#[derive(Debug, Clone, Copy)]
pub struct NetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl NetVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl MineNetwork {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(d_in: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(HIDDEN, d_in, rng),
            b1: Tensor::zeros(vec![1, HIDDEN]),
            w2: glorot(HIDDEN, HIDDEN, rng),
            b2: Tensor::zeros(vec![1, HIDDEN]),
            w3: glorot(1, HIDDEN, rng),
            b3: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn zeros(d_in: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![HIDDEN, d_in]),
            b1: Tensor::zeros(vec![1, HIDDEN]),
            w2: Tensor::zeros(vec![HIDDEN, HIDDEN]),
            b2: Tensor::zeros(vec![1, HIDDEN]),
            w3: Tensor::zeros(vec![1, HIDDEN]),
            b3: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> Result<NetVars> {
        Ok(NetVars {
            w1: tape.param(self.w1.clone())?,
            b1: tape.param(self.b1.clone())?,
            w2: tape.param(self.w2.clone())?,
            b2: tape.param(self.b2.clone())?,
            w3: tape.param(self.w3.clone())?,
            b3: tape.param(self.b3.clone())?,
        })
    }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let xw = tape.matmul(x, wt)?;
    Ok(tape.add_row(xw, b)?)
}

/// Critic outputs (N×1) for N input rows laid out as fixed-image channels
/// followed by moving-image channels.
pub fn mlp_forward(tape: &mut Tape, net: &NetVars, x: Var) -> Result<Var> {
    let expected = tape.shape(net.w1)[1];
    let got = tape.value(x).dims2("mlp_forward")?.1;
    if got != expected {
        return Err(MineError::InputWidth { expected, got });
    }
    let h = dense(tape, x, net.w1, net.b1)?;
    let h = tape.relu(h)?;
    let h = dense(tape, h, net.w2, net.b2)?;
    let h = tape.relu(h)?;
    dense(tape, h, net.w3, net.b3)
}

/// `log(mean(exp(t)))`, shifted by the (constant) maximum before
/// exponentiating. The shift cancels exactly, so it carries no gradient.
pub fn log_mean_exp(tape: &mut Tape, t: Var) -> Result<Var> {
    let max = tape
        .value(t)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(t, -max)?;
    let e = tape.exp(shifted)?;
    let m = tape.mean(e)?;
    let l = tape.log(m)?;
    Ok(tape.add_scalar(l, max)?)
}

/// Uniform random permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// DV bound with an explicit marginal-pairing permutation.
pub fn dv_bound_with_permutation(
    tape: &mut Tape,
    net: &NetVars,
    p: Var,
    q: Var,
    perm: &[usize],
) -> Result<Var> {
    let (np, _) = tape.value(p).dims2("dv_bound")?;
    let (nq, _) = tape.value(q).dims2("dv_bound")?;
    if np != nq {
        return Err(MineError::RowMismatch(np, nq));
    }
    if np < 2 {
        return Err(MineError::TooFewSamples(np));
    }
    let joint = tape.concat_cols(p, q)?;
    let q_shuffled = tape.gather_rows(q, perm)?;
    let marginal = tape.concat_cols(p, q_shuffled)?;
    let t_joint = mlp_forward(tape, net, joint)?;
    let t_marginal = mlp_forward(tape, net, marginal)?;
    let first = tape.mean(t_joint)?;
    let second = log_mean_exp(tape, t_marginal)?;
    Ok(tape.sub(first, second)?)
}

/// DV bound on co-indexed samples `p` (N×C_f) and `q` (N×C_m), drawing a
/// fresh permutation from `rng`.
pub fn dv_bound<R: Rng + ?Sized>(
    tape: &mut Tape,
    net: &NetVars,
    p: Var,
    q: Var,
    rng: &mut R,
) -> Result<Var> {
    let n = tape.value(p).dims2("dv_bound")?.0;
    if n < 2 {
        return Err(MineError::TooFewSamples(n));
    }
    let perm = permutation(n, rng);
    dv_bound_with_permutation(tape, net, p, q, &perm)
}

/// Ascent step on every network tensor.
pub fn update_network(
    net: &mut MineNetwork,
    states: &mut [AdamState],
    grads: &[Tensor],
    rate: f64,
) -> Result<()> {
    for ((t, st), g) in net.tensors_mut().into_iter().zip(states.iter_mut()).zip(grads) {
        st.step(t.data_mut(), g.data(), rate)?;
    }
    Ok(())
}

pub fn network_states(net: &MineNetwork) -> Vec<AdamState> {
    net.tensors().iter().map(|t| AdamState::new(t.len())).collect()
}

/// Closed-form MI of a bivariate Gaussian with correlation `rho`, in nats.
pub fn gaussian_mi(rho: f64) -> f64 {
    // + 0.0 turns -0.0 into 0.0 at rho = 0
    -0.5 * (1.0 - rho * rho).ln() + 0.0
}

/// `n` pairs `(x, ρx + √(1-ρ²)ε)` with standard normal `x, ε`.
pub fn correlated_gaussians<R: Rng + ?Sized>(rho: f64, n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let s = (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            (x, rho * x + s * e)
        })
        .unzip()
}

#[derive(Debug, Clone, Copy)]
pub struct SelftestConfig {
    pub rho: f64,
    pub samples: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            samples: 10_000,
            steps: 2000,
            batch: 500,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestReport {
    pub estimate: f64,
    /// Standard error of the joint-sample mean of the critic.
    pub std_error: f64,
    pub closed_form: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SelftestReport {
    pub fn pass(&self) -> bool {
        self.estimate >= self.lower && self.estimate <= self.upper
    }
}

fn mean_std_error(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (var / n).sqrt()
}

/// Number of permutations averaged in the final full-sample estimate.
const EVAL_PERMUTATIONS: usize = 8;

/// Train a fresh critic on correlated Gaussians and compare the resulting
/// bound with the closed-form MI. Training uses minibatches of the sample;
/// the reported estimate is the bound on the full sample, averaged over a
/// few marginal permutations.
pub fn selftest(cfg: &SelftestConfig) -> Result<SelftestReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (xs, zs) = correlated_gaussians(cfg.rho, cfg.samples, &mut rng);
    let mut net = MineNetwork::new(2, &mut rng);
    let mut states = network_states(&net);
    let batch = cfg.batch.clamp(2, cfg.samples);

    for _ in 0..cfg.steps {
        let idx = rand::seq::index::sample(&mut rng, cfg.samples, batch);
        let px: Vec<f64> = idx.iter().map(|i| xs[i]).collect();
        let qz: Vec<f64> = idx.iter().map(|i| zs[i]).collect();
        let mut tape = Tape::new();
        let vars = net.register(&mut tape)?;
        let p = tape.constant(Tensor::matrix(batch, 1, px)?)?;
        let q = tape.constant(Tensor::matrix(batch, 1, qz)?)?;
        let j = dv_bound(&mut tape, &vars, p, q, &mut rng)?;
        let g = tape.backward(j)?;
        let grads: Vec<Tensor> = vars.all().iter().map(|&v| g.get(v)).collect();
        update_network(&mut net, &mut states, &grads, cfg.learning_rate)?;
    }

    let mut total = 0.0;
    let mut std_error = 0.0;
    for k in 0..EVAL_PERMUTATIONS {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape)?;
        let p = tape.constant(Tensor::matrix(cfg.samples, 1, xs.clone())?)?;
        let q = tape.constant(Tensor::matrix(cfg.samples, 1, zs.clone())?)?;
        let j = dv_bound(&mut tape, &vars, p, q, &mut rng)?;
        total += tape.value(j).item();
        if k == 0 {
            let joint = tape.concat_cols(p, q)?;
            let t = mlp_forward(&mut tape, &vars, joint)?;
            std_error = mean_std_error(tape.value(t).data());
        }
    }
    let closed_form = gaussian_mi(cfg.rho);
    Ok(SelftestReport {
        estimate: total / EVAL_PERMUTATIONS as f64,
        std_error,
        closed_form,
        lower: closed_form - 0.10,
        upper: closed_form + 0.05,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rows(tape: &mut Tape, n: usize, c: usize, f: impl Fn(usize) -> f64) -> Var {
        let data = (0..n * c).map(f).collect();
        tape.constant(Tensor::matrix(n, c, data).unwrap()).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MineNetwork::zeros(4);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape).unwrap();
        let x = rows(&mut tape, 5, 4, |i| i as f64 * 0.1);
        let y = mlp_forward(&mut tape, &vars, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_only() {
        let mut net = MineNetwork::zeros(2);
        net.b3 = Tensor::matrix(1, 1, vec![1.75]).unwrap();
        let mut tape = Tape::new();
        let vars = net.register(&mut tape).unwrap();
        let x = rows(&mut tape, 3, 2, |i| i as f64);
        let y = mlp_forward(&mut tape, &vars, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.75));
        // constant critic ⇒ c − log(exp c) = 0
        let p = rows(&mut tape, 6, 1, |i| i as f64 / 6.0);
        let q = rows(&mut tape, 6, 1, |i| 1.0 - i as f64 / 6.0);
        let j = dv_bound(&mut tape, &vars, p, q, &mut rng(1)).unwrap();
        assert_eq!(tape.value(j).item(), 0.0);
    }

    #[test]
    fn width_and_count_errors() {
        let net = MineNetwork::new(2, &mut rng(0));
        let mut tape = Tape::new();
        let vars = net.register(&mut tape).unwrap();
        let x = rows(&mut tape, 3, 3, |_| 0.5);
        assert_eq!(
            mlp_forward(&mut tape, &vars, x).unwrap_err(),
            MineError::InputWidth { expected: 2, got: 3 }
        );
        let p = rows(&mut tape, 1, 1, |_| 0.5);
        assert_eq!(
            dv_bound(&mut tape, &vars, p, p, &mut rng(0)).unwrap_err(),
            MineError::TooFewSamples(1)
        );
    }

    #[test]
    fn bias_shift_invariance() {
        let net = MineNetwork::new(2, &mut rng(4));
        let mut shifted = net.clone();
        shifted.b3.data_mut()[0] += 3.7;
        let eval = |net: &MineNetwork| {
            let mut tape = Tape::new();
            let vars = net.register(&mut tape).unwrap();
            let p = rows(&mut tape, 64, 1, |i| (i as f64 * 0.37).sin().abs());
            let q = rows(&mut tape, 64, 1, |i| (i as f64 * 0.37).cos().abs());
            let j = dv_bound(&mut tape, &vars, p, q, &mut rng(8)).unwrap();
            tape.value(j).item()
        };
        assert!((eval(&net) - eval(&shifted)).abs() < 1e-9);
    }

    #[test]
    fn swapping_roles_with_permuted_weights() {
        // f'(q, p) with W₁ columns swapped equals f(p, q)
        let net = MineNetwork::new(4, &mut rng(6));
        let mut swapped = net.clone();
        let w = net.w1.data();
        let d = swapped.w1.data_mut();
        for r in 0..HIDDEN {
            for c in 0..4 {
                d[r * 4 + c] = w[r * 4 + (c + 2) % 4];
            }
        }
        let n = 50;
        let pd: Vec<f64> = (0..n * 2).map(|i| (i as f64 * 0.11).sin().abs()).collect();
        let qd: Vec<f64> = (0..n * 2).map(|i| (i as f64 * 0.23).cos().abs()).collect();
        let perm = permutation(n, &mut rng(2));
        let mut inv = vec![0; n];
        for (i, &s) in perm.iter().enumerate() {
            inv[s] = i;
        }
        let eval = |net: &MineNetwork, a: &[f64], b: &[f64], perm: &[usize]| {
            let mut tape = Tape::new();
            let vars = net.register(&mut tape).unwrap();
            let p = tape.constant(Tensor::matrix(n, 2, a.to_vec()).unwrap()).unwrap();
            let q = tape.constant(Tensor::matrix(n, 2, b.to_vec()).unwrap()).unwrap();
            let j = dv_bound_with_permutation(&mut tape, &vars, p, q, perm).unwrap();
            tape.value(j).item()
        };
        // marginal pairs (q_i, p_inv(i)) of the swapped call are the pairs
        // (p_k, q_perm(k)) of the original one
        let a = eval(&net, &pd, &qd, &perm);
        let b = eval(&swapped, &qd, &pd, &inv);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn deterministic_given_seed() {
        let net = MineNetwork::new(2, &mut rng(1));
        let eval = || {
            let mut tape = Tape::new();
            let vars = net.register(&mut tape).unwrap();
            let p = rows(&mut tape, 32, 1, |i| i as f64 / 32.0);
            let q = rows(&mut tape, 32, 1, |i| (i as f64 / 32.0).powi(2));
            let j = dv_bound(&mut tape, &vars, p, q, &mut rng(77)).unwrap();
            tape.value(j).item()
        };
        assert_eq!(eval().to_bits(), eval().to_bits());
    }

    #[test]
    fn large_outputs_do_not_overflow() {
        let mut net = MineNetwork::new(2, &mut rng(3));
        for x in net.w3.data_mut() {
            *x *= 5000.0;
        }
        let mut tape = Tape::new();
        let vars = net.register(&mut tape).unwrap();
        let p = rows(&mut tape, 16, 1, |i| i as f64 / 16.0);
        let q = rows(&mut tape, 16, 1, |i| 1.0 - i as f64 / 16.0);
        let j = dv_bound(&mut tape, &vars, p, q, &mut rng(0)).unwrap();
        assert!(tape.value(j).item().is_finite());
    }

    #[test]
    fn independent_samples_give_near_zero_bound() {
        let net = MineNetwork::new(2, &mut rng(21));
        let mut data_rng = rng(22);
        let n = 4096;
        let mut total = 0.0;
        for _ in 0..100 {
            let (x, _) = correlated_gaussians(0.0, n, &mut data_rng);
            let (z, _) = correlated_gaussians(0.0, n, &mut data_rng);
            let mut tape = Tape::new();
            let vars = net.register(&mut tape).unwrap();
            let p = tape.constant(Tensor::matrix(n, 1, x).unwrap()).unwrap();
            let q = tape.constant(Tensor::matrix(n, 1, z).unwrap()).unwrap();
            let j = dv_bound(&mut tape, &vars, p, q, &mut data_rng).unwrap();
            total += tape.value(j).item();
        }
        let mean = total / 100.0;
        assert!((-0.1..=0.05).contains(&mean), "{mean}");
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(gaussian_mi(0.0), 0.0);
        assert!((gaussian_mi(0.9) - 0.830_366_3).abs() < 1e-6);
    }
}
