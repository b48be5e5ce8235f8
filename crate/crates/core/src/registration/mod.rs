//! Joint ascent of the critic and the transform parameters over a pyramid.

pub mod adam;
mod objective;

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{AdamConfig, AdamState, OptimError};
pub use objective::{objective, Critic, LevelBatch, LevelTransforms, ObjectiveValue};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::imageio::{Image, ImageError, TransformRecord};
use crate::lie_affine::{AffineMatrix, LieParams, Parameterization};
use crate::mine::{network_states, update_network, MineError, MineNetwork};
use crate::pyramid::{build_pyramid, max_levels, Pyramid, PyramidError};
use crate::sampler::{canny_sample, random_sample, CannyParams, SampleOrigin, SamplerError};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Mine(#[from] MineError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{metric} needs equal channel counts, got {fixed} and {moving}")]
    ChannelMismatch {
        metric: Metric,
        fixed: usize,
        moving: usize,
    },
    #[error("no pyramid level has enough overlapping samples")]
    NoOverlap,
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        source: Box<RegistrationError>,
    },
}

impl RegistrationError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            RegistrationError::Iteration { source, .. } => source.is_numerical(),
            RegistrationError::Autodiff(_)
            | RegistrationError::Optim(_)
            | RegistrationError::NoOverlap => true,
            RegistrationError::Mine(e) => matches!(e, MineError::Autodiff(_) | MineError::Optim(_)),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, RegistrationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Mine,
    Mse,
    Ncc,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Mine => "mine",
            Metric::Mse => "mse",
            Metric::Ncc => "ncc",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mine" => Ok(Metric::Mine),
            "mse" => Ok(Metric::Mse),
            "ncc" => Ok(Metric::Ncc),
            _ => Err(format!("unknown metric '{s}' (expected mine, mse or ncc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerKind {
    #[default]
    Canny,
    Random,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Canny => "canny",
            SamplerKind::Random => "random",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "canny" => Ok(SamplerKind::Canny),
            "random" => Ok(SamplerKind::Random),
            _ => Err(format!("unknown sampler '{s}' (expected canny or random)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub iterations: usize,
    /// Critic learning rate.
    pub lr_theta: f64,
    pub lr_v: f64,
    pub lr_v1: f64,
    pub sampler: SamplerKind,
    pub sample_fraction: f64,
    pub canny: CannyParams,
    pub metric: Metric,
    pub seed: u64,
    pub use_matrix_exp: bool,
    pub use_v1: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            iterations: 500,
            lr_theta: 1e-3,
            lr_v: 5e-3,
            lr_v1: 1e-4,
            sampler: SamplerKind::Canny,
            sample_fraction: 0.1,
            canny: CannyParams::default(),
            metric: Metric::Mine,
            seed: 0,
            use_matrix_exp: true,
            use_v1: true,
        }
    }
}

impl RegistrationConfig {
    pub fn parameterization(&self) -> Parameterization {
        if self.use_matrix_exp {
            Parameterization::Mexp
        } else {
            Parameterization::Direct
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RegistrationError::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        for (name, r) in [("lr_theta", self.lr_theta), ("lr_v", self.lr_v), ("lr_v1", self.lr_v1)] {
            if !(r.is_finite() && r >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {r}"));
            }
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!("sample fraction must be in (0, 1], got {}", self.sample_fraction));
        }
        self.canny.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub record: TransformRecord,
    pub trace: Vec<TracePoint>,
    pub wall_time: Duration,
    pub iterations: usize,
    /// Objective at the returned parameters.
    pub final_objective: f64,
}

impl RegistrationResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,objective,wall_ms\n");
        for p in &self.trace {
            let _ = writeln!(out, "{},{},{:.3}", p.iteration, p.objective, p.wall_ms);
        }
        out
    }
}

/// Objective value together with its gradient in `v` and `v1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveGrad {
    pub value: f64,
    pub grad_v: [f64; 6],
    pub grad_v1: [f64; 6],
}

#[derive(Debug, Clone)]
enum LevelSampler {
    Fixed(LevelBatch),
    Random { fraction: f64 },
}

// independent streams of one seed
const STREAM_INIT: u64 = 0;
const STREAM_SAMPLE: u64 = 1;
const STREAM_PERM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A prepared registration problem holding pyramids, samplers, critic and
/// optimizer state.
#[derive(Debug, Clone)]
pub struct Registration {
    cfg: RegistrationConfig,
    fixed: Pyramid,
    moving: Pyramid,
    samplers: Vec<LevelSampler>,
    net: Option<MineNetwork>,
    net_states: Vec<AdamState>,
    params: LieParams,
    v_state: AdamState,
    v1_state: AdamState,
    sample_rng: ChaCha8Rng,
    perm_rng: ChaCha8Rng,
    trace: Vec<TracePoint>,
    elapsed: Duration,
}

impl Registration {
    pub fn new(fixed: &Image, moving: &Image, cfg: &RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        fixed.check_registrable()?;
        moving.check_registrable()?;
        if cfg.metric != Metric::Mine && fixed.channels() != moving.channels() {
            return Err(RegistrationError::ChannelMismatch {
                metric: cfg.metric,
                fixed: fixed.channels(),
                moving: moving.channels(),
            });
        }
        let cap = max_levels(fixed.dims()).min(max_levels(moving.dims()));
        if cfg.levels > cap {
            log::warn!("requested {} levels, images allow {cap}; using {cap}", cfg.levels);
        }
        let levels = cfg.levels.min(cap);
        let fixed_pyr = build_pyramid(fixed, levels)?;
        let moving_pyr = build_pyramid(moving, levels)?;

        let mut init_rng = stream(cfg.seed, STREAM_INIT);
        let mut samplers = Vec::with_capacity(levels);
        for l in 1..=levels {
            let img = fixed_pyr.level(l);
            let s = match cfg.sampler {
                SamplerKind::Random => LevelSampler::Random {
                    fraction: cfg.sample_fraction,
                },
                SamplerKind::Canny => {
                    let set = canny_sample(l, img, &cfg.canny, &mut init_rng)?;
                    if set.origin == SampleOrigin::Fallback {
                        log::warn!("level {l}: too few edges, sampling at random");
                        LevelSampler::Random {
                            fraction: cfg.canny.fallback_fraction,
                        }
                    } else {
                        log::debug!("level {l}: {} edge samples", set.len());
                        LevelSampler::Fixed(LevelBatch::from_samples(img, &set))
                    }
                }
            };
            samplers.push(s);
        }

        let net = (cfg.metric == Metric::Mine)
            .then(|| MineNetwork::new(fixed.channels() + moving.channels(), &mut init_rng));
        let net_states = net.as_ref().map(network_states).unwrap_or_default();
        let parameterization = cfg.parameterization();
        Ok(Self {
            cfg: cfg.clone(),
            fixed: fixed_pyr,
            moving: moving_pyr,
            samplers,
            net,
            net_states,
            params: LieParams {
                v: parameterization.identity_params(),
                v1: [0.0; 6],
            },
            v_state: AdamState::new(6),
            v1_state: AdamState::new(6),
            sample_rng: stream(cfg.seed, STREAM_SAMPLE),
            perm_rng: stream(cfg.seed, STREAM_PERM),
            trace: Vec::new(),
            elapsed: Duration::ZERO,
        })
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.cfg
    }

    pub fn levels(&self) -> usize {
        self.fixed.len()
    }

    pub fn params(&self) -> LieParams {
        self.params
    }

    pub fn set_params(&mut self, params: LieParams) {
        self.params = params;
    }

    pub fn network(&self) -> Option<&MineNetwork> {
        self.net.as_ref()
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    /// Clone of the permutation stream, for reproducing an evaluation.
    pub fn permutation_rng(&self) -> ChaCha8Rng {
        self.perm_rng.clone()
    }

    /// One batch per level: the stored edge set, or a fresh random draw.
    pub fn draw_batches(&mut self) -> Result<Vec<LevelBatch>> {
        let mut out = Vec::with_capacity(self.samplers.len());
        for (i, s) in self.samplers.iter().enumerate() {
            let l = i + 1;
            out.push(match s {
                LevelSampler::Fixed(b) => b.clone(),
                LevelSampler::Random { fraction } => {
                    let img = self.fixed.level(l);
                    let set = random_sample(l, img.dims(), *fraction, &mut self.sample_rng)?;
                    LevelBatch::from_samples(img, &set)
                }
            });
        }
        Ok(out)
    }

    /// The record for the current parameters.
    pub fn record(&self) -> TransformRecord {
        TransformRecord::new(
            self.params,
            self.cfg.parameterization(),
            self.fixed.level(1).dims(),
            self.moving.level(1).dims(),
        )
    }

    fn critic_vars(&self, tape: &mut Tape) -> Result<Option<crate::mine::NetVars>> {
        Ok(match &self.net {
            Some(n) => Some(n.register(tape)?),
            None => None,
        })
    }

    fn critic<'a>(&self, vars: &'a Option<crate::mine::NetVars>) -> Critic<'a> {
        match (self.cfg.metric, vars) {
            (Metric::Mine, Some(v)) => Critic::Mine(v),
            (Metric::Ncc, _) => Critic::Ncc,
            _ => Critic::Mse,
        }
    }

    /// Objective and (v, v1) gradient at `params` with the current critic,
    /// using `rng` for the marginal permutations.
    pub fn evaluate(
        &self,
        params: &LieParams,
        batches: &[LevelBatch],
        rng: &mut ChaCha8Rng,
    ) -> Result<ObjectiveGrad> {
        let p = self.cfg.parameterization();
        let mut tape = Tape::new();
        let vars = self.critic_vars(&mut tape)?;
        let v = tape.param(Tensor::row(params.v.to_vec()))?;
        let v1 = tape.param(Tensor::row(params.v1.to_vec()))?;
        let combined = tape.add(v, v1)?;
        let finest = p.matrix_var(&mut tape, combined)?;
        let coarse = if self.levels() > 1 {
            p.matrix_var(&mut tape, v)?
        } else {
            finest
        };
        let obj = objective(
            &mut tape,
            &self.fixed,
            &self.moving,
            batches,
            LevelTransforms { finest, coarse },
            self.critic(&vars),
            rng,
        )?;
        let g = tape.backward(obj.total)?;
        let arr = |t: Tensor| -> [f64; 6] { t.data().try_into().expect("1x6 gradient") };
        Ok(ObjectiveGrad {
            value: tape.value(obj.total).item(),
            grad_v: arr(g.get(v)),
            grad_v1: arr(g.get(v1)),
        })
    }

    /// Objective with explicit finest and coarse matrices.
    pub fn evaluate_matrices(
        &self,
        finest: &AffineMatrix,
        coarse: &AffineMatrix,
        batches: &[LevelBatch],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.critic_vars(&mut tape)?;
        let as_var = |tape: &mut Tape, m: &AffineMatrix| {
            let data = m.rows().iter().flatten().copied().collect();
            tape.constant(Tensor::matrix(3, 3, data)?)
        };
        let finest = as_var(&mut tape, finest)?;
        let coarse = as_var(&mut tape, coarse)?;
        let obj = objective(
            &mut tape,
            &self.fixed,
            &self.moving,
            batches,
            LevelTransforms { finest, coarse },
            self.critic(&vars),
            rng,
        )?;
        Ok(tape.value(obj.total).item())
    }

    /// Objective implied by a stored record: `H₁` from its matrix, coarser
    /// levels from its `v`.
    pub fn evaluate_record(
        &self,
        record: &TransformRecord,
        batches: &[LevelBatch],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        record.verify()?;
        let finest = record.affine()?;
        let coarse = record.parameterization.matrix(&record.v);
        self.evaluate_matrices(&finest, &coarse, batches, rng)
    }

    /// One ascent step on critic and transform. Returns the objective
    /// before the update.
    pub fn step(&mut self) -> Result<f64> {
        let iteration = self.trace.len() + 1;
        let start = Instant::now();
        let out = self.step_inner().map_err(|e| RegistrationError::Iteration {
            iteration,
            source: Box::new(e),
        })?;
        self.elapsed += start.elapsed();
        self.trace.push(TracePoint {
            iteration,
            objective: out,
            wall_ms: self.elapsed.as_secs_f64() * 1e3,
        });
        Ok(out)
    }

    fn step_inner(&mut self) -> Result<f64> {
        let batches = self.draw_batches()?;
        let p = self.cfg.parameterization();
        let mut tape = Tape::new();
        let vars = self.critic_vars(&mut tape)?;
        let v = tape.param(Tensor::row(self.params.v.to_vec()))?;
        let v1 = if self.cfg.use_v1 {
            tape.param(Tensor::row(self.params.v1.to_vec()))?
        } else {
            tape.constant(Tensor::row(self.params.v1.to_vec()))?
        };
        let combined = tape.add(v, v1)?;
        let finest = p.matrix_var(&mut tape, combined)?;
        let coarse = if self.levels() > 1 {
            p.matrix_var(&mut tape, v)?
        } else {
            finest
        };
        let mut perm_rng = self.perm_rng.clone();
        let obj = objective(
            &mut tape,
            &self.fixed,
            &self.moving,
            &batches,
            LevelTransforms { finest, coarse },
            self.critic(&vars),
            &mut perm_rng,
        )?;
        let value = tape.value(obj.total).item();
        let g = tape.backward(obj.total)?;

        // validate everything before touching any state
        let gv = g.get(v);
        let gv1 = g.get(v1);
        let net_grads: Option<Vec<Tensor>> = vars.as_ref().map(|nv| nv.all().iter().map(|&x| g.get(x)).collect());
        for t in std::iter::once(&gv).chain(&[gv1.clone()]).chain(net_grads.iter().flatten()) {
            if let Some(index) = t.data().iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient { index }.into());
            }
        }

        if let (Some(net), Some(grads)) = (self.net.as_mut(), net_grads.as_ref()) {
            update_network(net, &mut self.net_states, grads, self.cfg.lr_theta)?;
        }
        self.v_state.step(&mut self.params.v, gv.data(), self.cfg.lr_v)?;
        if self.cfg.use_v1 {
            self.v1_state.step(&mut self.params.v1, gv1.data(), self.cfg.lr_v1)?;
        }
        self.perm_rng = perm_rng;
        Ok(value)
    }

    pub fn run(mut self) -> Result<RegistrationResult> {
        for _ in 0..self.cfg.iterations {
            let obj = self.step()?;
            let it = self.trace.len();
            if it % 50 == 0 || it == self.cfg.iterations {
                log::info!("iteration {it}: objective {obj:.6}");
            }
        }
        let batches = self.draw_batches()?;
        let mut rng = self.perm_rng.clone();
        let final_objective = self.evaluate(&self.params, &batches, &mut rng)?.value;
        Ok(RegistrationResult {
            record: self.record(),
            iterations: self.trace.len(),
            wall_time: self.elapsed,
            trace: self.trace,
            final_objective,
        })
    }
}

/// Register `moving` onto `fixed`.
pub fn register(fixed: &Image, moving: &Image, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    Registration::new(fixed, moving, cfg)?.run()
}
