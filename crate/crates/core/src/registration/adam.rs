//! Adam with the AMSGrad running maximum, used for gradient *ascent*.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient entry {index}")]
    NonFiniteGradient { index: usize },
    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    LengthMismatch { params: usize, grads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<f64>,
    u: Vec<f64>,
    u_max: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_config(len, AdamConfig::default())
    }

    pub fn with_config(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            u: vec![0.0; len],
            u_max: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn max_second_moment(&self) -> &[f64] {
        &self.u_max
    }

    /// One ascent step: `params += rate · m̂ / (√(û / (1 - β₂ᵗ)) + ε)`.
    /// The state is untouched when the gradient is rejected.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], rate: f64) -> Result<(), OptimError> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(OptimError::LengthMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index });
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.u[i] = beta2 * self.u[i] + (1.0 - beta2) * g * g;
            self.u_max[i] = self.u_max[i].max(self.u[i]);
            let denom = (self.u_max[i] / bc2).sqrt() + eps;
            params[i] += rate * (self.m[i] / bc1) / denom;
        }
        Ok(())
    }
}
