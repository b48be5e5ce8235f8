//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use drmime::gradcheck::{run_suite, MEXP_TOLERANCE};
use drmime::imageio::{Image, LandmarkSet};
use drmime::lie_affine::{algebra_element, mexp, mexp_oracle, AffineMatrix};
use drmime::metrics::{histogram_entropy, histogram_mi, naed};
use drmime::mine::{selftest, SelftestConfig};
use drmime::registration::{register, Metric, RegistrationConfig, RegistrationResult, SamplerKind};
use drmime::synth::{synthesize, test_pattern, SynthParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 256;
const PATTERN_SEED: u64 = 7;
const REG_SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn truth() -> SynthParams {
    SynthParams {
        rot_deg: 5.0,
        tx: 0.05,
        ty: 0.0,
        scale: 1.03,
    }
}

struct Problem {
    fixed: Image,
    moving: Image,
    landmarks: LandmarkSet,
}

fn mono() -> Problem {
    let fixed = test_pattern(SIDE, SIDE, PATTERN_SEED);
    let pair = synthesize(&fixed, &truth()).expect("valid synth parameters");
    Problem {
        fixed,
        moving: pair.moving,
        landmarks: pair.landmarks,
    }
}

fn multi() -> Problem {
    let fixed = test_pattern(SIDE, SIDE, PATTERN_SEED);
    let pair = synthesize(&fixed.map(|x| 1.0 - x * x), &truth()).expect("valid synth parameters");
    Problem {
        fixed,
        moving: pair.moving,
        landmarks: pair.landmarks,
    }
}

fn defaults() -> RegistrationConfig {
    RegistrationConfig {
        seed: REG_SEED,
        ..RegistrationConfig::default()
    }
}

fn run(p: &Problem, cfg: &RegistrationConfig) -> Result<(RegistrationResult, f64), String> {
    let r = register(&p.fixed, &p.moving, cfg).map_err(|e| e.to_string())?;
    r.record.verify().map_err(|e| e.to_string())?;
    let h = r.record.affine().map_err(|e| e.to_string())?;
    let n = naed(&p.landmarks, &h, p.fixed.dims(), p.moving.dims()).map_err(|e| e.to_string())?;
    Ok((r, n.mean))
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let results = match run_suite(2024) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("non-empty suite");
    let failing: Vec<&str> = results.iter().filter(|r| !r.pass()).map(|r| r.name).collect();
    let mexp_err = results.iter().find(|r| r.name == "mexp").map(|r| r.rel_err).unwrap_or(f64::NAN);
    outcome(
        failing.is_empty() && mexp_err < MEXP_TOLERANCE && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst {} {:.2e}, mexp {:.2e}, failing {:?}, {:.1}s",
            results.len(),
            worst.name,
            worst.rel_err,
            mexp_err,
            failing,
            elapsed.as_secs_f64()
        ),
    )
}

/// Induced 1-norm (max column sum) of the algebra element.
fn algebra_norm(c: &[f64; 6]) -> f64 {
    let b = algebra_element(c);
    (0..3).map(|j| (0..3).map(|i| b[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn matrix_exponential() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let mut rows_ok = true;
    let mut drawn = 0;
    while drawn < 1000 {
        let c: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if algebra_norm(&c) > 1.0 {
            continue;
        }
        drawn += 1;
        let m = mexp(&c);
        worst = worst.max(m.max_abs_diff(&mexp_oracle(&c)));
        rows_ok &= m.rows()[2] == [0.0, 0.0, 1.0];
    }
    let th = 0.5f64;
    let rot = AffineMatrix::from_rows([[th.cos(), -th.sin(), 0.0], [th.sin(), th.cos(), 0.0], [0.0, 0.0, 1.0]])
        .expect("affine");
    let rot_err = mexp(&[0.0, 0.0, th, 0.0, 0.0, 0.0]).max_abs_diff(&rot);
    let zero_exact = mexp(&[0.0; 6]) == AffineMatrix::identity();
    // e − Σ_{n≤10} 1/n!, the truncation error of a unit-norm scalar element
    let tail = std::f64::consts::E - (0..=10).map(|n| 1.0 / (1..=n).product::<u64>() as f64).sum::<f64>();
    outcome(
        worst < 1e-9 && rot_err < 1e-10 && zero_exact && rows_ok,
        format!(
            "oracle gap {worst:.2e} (10-term tail at norm 1 is {tail:.2e}), rotation gap {rot_err:.2e}, \
             mexp(0)=I {zero_exact}, bottom rows exact {rows_ok}"
        ),
    )
}

fn mine_oracle() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for rho in [0.0, 0.5, 0.9] {
        match selftest(&SelftestConfig {
            rho,
            seed: 3,
            ..SelftestConfig::default()
        }) {
            Ok(r) => {
                pass &= r.pass();
                parts.push(format!(
                    "rho {rho}: {:.4} in [{:.4}, {:.4}]",
                    r.estimate, r.lower, r.upper
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("rho {rho}: {e}"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        pass && elapsed < Duration::from_secs(180),
        format!("{}; {:.1}s", parts.join("; "), elapsed.as_secs_f64()),
    )
}

fn mono_recovery() -> (Outcome, Option<String>) {
    let p = mono();
    let start = Instant::now();
    match run(&p, &defaults()) {
        Ok((r, n)) => {
            let elapsed = start.elapsed();
            (
                outcome(
                    n < 0.005 && p.landmarks.len() >= 10 && elapsed < Duration::from_secs(300),
                    format!("NAED {n:.5} on {} landmarks, {:.1}s", p.landmarks.len(), elapsed.as_secs_f64()),
                ),
                Some(r.record.to_json()),
            )
        }
        Err(e) => (outcome(false, e), None),
    }
}

fn multi_modal() -> Outcome {
    let p = multi();
    let mine = run(&p, &defaults());
    let mse = run(
        &p,
        &RegistrationConfig {
            metric: Metric::Mse,
            ..defaults()
        },
    );
    match (mine, mse) {
        (Ok((_, a)), Ok((_, b))) => outcome(a < 0.01 && b > a, format!("mine NAED {a:.5}, mse NAED {b:.5}")),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn ablations() -> Outcome {
    let p = mono();
    let variants = [
        ("levels=1", RegistrationConfig { levels: 1, ..defaults() }),
        ("no-matrix-exp", RegistrationConfig { use_matrix_exp: false, ..defaults() }),
        ("sampler=random", RegistrationConfig { sampler: SamplerKind::Random, ..defaults() }),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg) in variants {
        match run(&p, &cfg) {
            Ok((_, n)) => parts.push(format!("{name} NAED {n:.5}")),
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    let mean = |sampler| -> Result<f64, String> {
        let mut total = 0.0;
        for seed in 0..5 {
            total += run(&p, &RegistrationConfig { sampler, seed, ..defaults() })?.1;
        }
        Ok(total / 5.0)
    };
    match (mean(SamplerKind::Canny), mean(SamplerKind::Random)) {
        (Ok(c), Ok(r)) => parts.push(format!(
            "5-seed mean NAED canny {c:.5} vs random {r:.5} ({})",
            if c <= r { "canny <= random" } else { "canny > random" }
        )),
        (Err(e), _) | (_, Err(e)) => {
            pass = false;
            parts.push(e);
        }
    }
    outcome(pass, parts.join("; "))
}

fn histogram_mi_checks() -> Outcome {
    let noise = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(SIDE, SIDE, 1, |_, _, _| rng.random::<f64>()).expect("in range")
    };
    let p = test_pattern(SIDE, SIDE, PATTERN_SEED);
    let q = p.map(|x| 1.0 - x * x);
    let bins = 32;
    let self_gap = (histogram_mi(&p, &p, bins).unwrap() - histogram_entropy(&p, bins).unwrap()).abs();
    let symmetric = histogram_mi(&p, &q, bins).unwrap().to_bits() == histogram_mi(&q, &p, bins).unwrap().to_bits();
    let indep = histogram_mi(&noise(1), &noise(2), bins).unwrap();
    outcome(
        self_gap < 1e-12 && symmetric && indep < 0.05,
        format!("|MI(P,P) - H(P)| {self_gap:.1e}, symmetric {symmetric}, independent noise {indep:.4}"),
    )
}

fn determinism(first: Option<String>) -> Outcome {
    let p = mono();
    let Some(a) = first else {
        return outcome(false, "reference run failed".into());
    };
    match run(&p, &defaults()) {
        Ok((r, _)) => {
            let same = r.record.to_json() == a;
            outcome(same, format!("transform JSON identical: {same}"))
        }
        Err(e) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: usize, title: &str, o: Outcome| {
        all &= o.pass;
        println!(
            "criterion {n} {title}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(1, "gradcheck", gradcheck());
    report(2, "matrix exponential", matrix_exponential());
    report(3, "MINE Gaussian oracle", mine_oracle());
    let (mono_outcome, json) = mono_recovery();
    report(4, "mono-modal recovery", mono_outcome);
    report(5, "multi-modal recovery", multi_modal());
    report(6, "ablation paths", ablations());
    report(7, "histogram MI", histogram_mi_checks());
    report(8, "determinism", determinism(json));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
