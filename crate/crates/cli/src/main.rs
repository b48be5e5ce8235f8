mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drmime::gradcheck::run_suite;
use drmime::imageio::{
    load_image, read_landmarks, read_transform, save_image, to_grayscale, write_landmarks, write_transform, Image,
    ImageError,
};
use drmime::metrics::naed;
use drmime::mine::{selftest, SelftestConfig};
use drmime::registration::{register, Metric, RegistrationConfig, RegistrationError, SamplerKind};
use drmime::sampler::CannyParams;
use drmime::synth::{synthesize, test_pattern, SynthParams};
use drmime::warp::warp_image;

use config::Settings;

pub const SEED_ENV: &str = "DRMIME_SEED";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<RegistrationError> for CliError {
    fn from(e: RegistrationError) -> Self {
        match e {
            RegistrationError::Image(inner) => inner.into(),
            RegistrationError::Config(_) | RegistrationError::Sampler(_) | RegistrationError::ChannelMismatch { .. } => {
                CliError::Usage(e.to_string())
            }
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Io(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "drmime", version, about = "Affine image registration by neural mutual-information maximization")]
struct Cli {
    /// Settings file of `key = value` lines; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Resample an image under a stored transform.
    Warp(WarpArgs),
    /// Landmark error of a stored transform.
    Eval(EvalArgs),
    /// Make a synthetic moving image with known ground truth.
    Synth(SynthArgs),
    /// Check the MI estimator on correlated Gaussians.
    MiSelftest(SelftestArgs),
    /// Compare every analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    if h == 0 || w == 0 {
        return Err(format!("dimensions must be positive, got '{s}'"));
    }
    Ok((h, w))
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Transform JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration objective CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Landmarks to score the result with.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long, value_parser = positive_usize)]
    levels: Option<usize>,
    #[arg(long, value_parser = positive_usize)]
    iters: Option<usize>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    sample_frac: Option<f64>,
    /// Falls back to the DRMIME_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Optimize the six matrix entries directly.
    #[arg(long)]
    no_matrix_exp: bool,
    /// Freeze the finest-level offset at zero.
    #[arg(long)]
    no_v1: bool,
    #[arg(long)]
    lr_theta: Option<f64>,
    #[arg(long)]
    lr_v: Option<f64>,
    #[arg(long)]
    lr_v1: Option<f64>,
    #[arg(long)]
    canny_sigma: Option<f64>,
    #[arg(long)]
    canny_low: Option<f64>,
    #[arg(long)]
    canny_high: Option<f64>,
    #[arg(long)]
    canny_cap: Option<usize>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    /// Moving image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    transform: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write |fixed - warped| next to the output.
    #[arg(long, value_name = "FIXED")]
    diff: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    transform: PathBuf,
    /// Defaults to the size stored in the transform.
    #[arg(long, value_parser = parse_dims, value_name = "HxW")]
    fixed_dims: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_dims, value_name = "HxW")]
    moving_dims: Option<(usize, usize)>,
    /// Per-pair distances as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["image", "pattern"])))]
struct SynthArgs {
    /// Fixed image to deform.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Generate a test pattern of this size instead.
    #[arg(long, value_parser = parse_dims, value_name = "HxW")]
    pattern: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    pattern_seed: u64,
    /// Where to write the generated pattern.
    #[arg(long)]
    out_fixed: Option<PathBuf>,
    /// Degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    rot: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    tx: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    ty: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    out_moving: PathBuf,
    #[arg(long)]
    out_landmarks: PathBuf,
    #[arg(long)]
    out_truth: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long, value_parser = positive_usize)]
    n: Option<usize>,
    #[arg(long, value_parser = positive_usize)]
    steps: Option<usize>,
    #[arg(long, value_parser = positive_usize)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn seed(flag: Option<u64>, settings: &Settings) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = settings.get("seed")? {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(0))
}

fn registration_config(a: &RegisterArgs, s: &Settings) -> Result<RegistrationConfig> {
    let d = RegistrationConfig::default();
    let cfg = RegistrationConfig {
        levels: s.pick(a.levels, "levels", d.levels)?,
        iterations: s.pick(a.iters, "iters", d.iterations)?,
        lr_theta: s.pick(a.lr_theta, "lr-theta", d.lr_theta)?,
        lr_v: s.pick(a.lr_v, "lr-v", d.lr_v)?,
        lr_v1: s.pick(a.lr_v1, "lr-v1", d.lr_v1)?,
        sampler: s.pick(a.sampler, "sampler", d.sampler)?,
        sample_fraction: s.pick(a.sample_frac, "sample-frac", d.sample_fraction)?,
        canny: CannyParams {
            sigma: s.pick(a.canny_sigma, "canny-sigma", d.canny.sigma)?,
            low_frac: s.pick(a.canny_low, "canny-low", d.canny.low_frac)?,
            high_frac: s.pick(a.canny_high, "canny-high", d.canny.high_frac)?,
            cap: s.pick(a.canny_cap, "canny-cap", d.canny.cap)?,
            ..d.canny
        },
        metric: s.pick(a.metric, "metric", d.metric)?,
        seed: seed(a.seed, s)?,
        use_matrix_exp: !s.switch(a.no_matrix_exp, "no-matrix-exp")?,
        use_v1: !s.switch(a.no_v1, "no-v1")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn print_matrix(m: &[[f64; 3]; 3]) {
    for row in m {
        println!("  [{:>12.8} {:>12.8} {:>12.8}]", row[0], row[1], row[2]);
    }
}

fn cmd_register(a: &RegisterArgs, s: &Settings) -> Result<()> {
    let cfg = registration_config(a, s)?;
    let fixed = load_image(&a.fixed)?;
    let moving = load_image(&a.moving)?;
    let landmarks = a.landmarks.as_ref().map(read_landmarks).transpose()?;
    let result = register(&fixed, &moving, &cfg)?;
    write_transform(&result.record, &a.out)?;
    if let Some(path) = &a.trace {
        write_text(path, &result.trace_csv())?;
    }
    println!(
        "registered {} onto {}: {} iterations, metric {}, {:.2}s",
        a.moving.display(),
        a.fixed.display(),
        result.iterations,
        cfg.metric,
        result.wall_time.as_secs_f64()
    );
    println!("final objective {}", result.final_objective);
    println!("transform (fixed -> moving, normalized coordinates):");
    print_matrix(&result.record.matrix);
    if let Some(lm) = landmarks {
        lm.warn_out_of_bounds(fixed.dims(), moving.dims());
        let h = result.record.affine()?;
        let report = naed(&lm, &h, fixed.dims(), moving.dims()).map_err(|e| CliError::Io(e.to_string()))?;
        println!("{}", report.summary());
    }
    Ok(())
}

fn cmd_warp(a: &WarpArgs) -> Result<()> {
    let moving = load_image(&a.image)?;
    let record = read_transform(&a.transform)?;
    let [mh, mw] = record.moving_size;
    if moving.dims() != (mh, mw) {
        log::warn!(
            "image is {}x{} but the transform was fitted to a {mh}x{mw} moving image",
            moving.height(),
            moving.width()
        );
    }
    let h = record.affine()?;
    let [fh, fw] = record.fixed_size;
    let warped = warp_image(&moving, &h, (fh, fw)).map_err(|e| CliError::Numerical(e.to_string()))?;
    save_image(&warped, &a.out)?;
    println!("wrote {} ({fh}x{fw})", a.out.display());
    if let Some(fixed_path) = &a.diff {
        let fixed = load_image(fixed_path)?;
        if fixed.dims() != warped.dims() {
            return Err(CliError::Io(format!(
                "fixed image is {}x{}, warped image is {fh}x{fw}",
                fixed.height(),
                fixed.width()
            )));
        }
        let (f, w) = if fixed.channels() == warped.channels() {
            (fixed, warped)
        } else {
            (to_grayscale(&fixed), to_grayscale(&warped))
        };
        let data = f.data().iter().zip(w.data()).map(|(x, y)| (x - y).abs()).collect();
        let diff = Image::new(fh, fw, f.channels(), data)?;
        let path = diff_path(&a.out);
        save_image(&diff, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn diff_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("warped");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("png");
    out.with_file_name(format!("{stem}_diff.{ext}"))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let lm = read_landmarks(&a.landmarks)?;
    let record = read_transform(&a.transform)?;
    let stored = |s: [usize; 2]| (s[0], s[1]);
    let fixed_dims = a.fixed_dims.unwrap_or(stored(record.fixed_size));
    let moving_dims = a.moving_dims.unwrap_or(stored(record.moving_size));
    if fixed_dims != stored(record.fixed_size) || moving_dims != stored(record.moving_size) {
        log::warn!("dimensions differ from those stored in {}", a.transform.display());
    }
    lm.warn_out_of_bounds(fixed_dims, moving_dims);
    let report = naed(&lm, &record.affine()?, fixed_dims, moving_dims).map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(path) = &a.out_csv {
        write_text(path, &report.to_csv())?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let params = SynthParams {
        rot_deg: a.rot,
        tx: a.tx,
        ty: a.ty,
        scale: a.scale,
    };
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let fixed = match (&a.image, a.pattern) {
        (Some(path), _) => load_image(path)?,
        (None, Some((h, w))) => test_pattern(h, w, a.pattern_seed),
        (None, None) => unreachable!("clap enforces one source"),
    };
    if let Some(path) = &a.out_fixed {
        save_image(&fixed, path)?;
    }
    let pair = synthesize(&fixed, &params).map_err(|e| CliError::Numerical(e.to_string()))?;
    save_image(&pair.moving, &a.out_moving)?;
    write_landmarks(&pair.landmarks, &a.out_landmarks)?;
    write_transform(&pair.truth, &a.out_truth)?;
    println!(
        "wrote {} ({} landmark pairs) with ground truth:",
        a.out_moving.display(),
        pair.landmarks.len()
    );
    print_matrix(&pair.truth.matrix);
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs, s: &Settings) -> Result<()> {
    let d = SelftestConfig::default();
    let cfg = SelftestConfig {
        rho: s.pick(a.rho, "rho", d.rho)?,
        samples: s.pick(a.n, "n", d.samples)?,
        steps: s.pick(a.steps, "steps", d.steps)?,
        batch: s.pick(a.batch, "batch", d.batch)?,
        learning_rate: s.pick(a.lr, "lr", d.learning_rate)?,
        seed: seed(a.seed, s)?,
    };
    if !(cfg.rho.abs() < 1.0) {
        return Err(CliError::Usage(format!("rho must be in (-1, 1), got {}", cfg.rho)));
    }
    if cfg.samples < 2 {
        return Err(CliError::Usage("n must be at least 2".into()));
    }
    let r = selftest(&cfg).map_err(|e| CliError::Numerical(e.to_string()))?;
    println!(
        "rho {} n {} steps {}: estimate {:.4} closed_form {:.4} accepted [{:.4}, {:.4}] {}",
        cfg.rho,
        cfg.samples,
        cfg.steps,
        r.estimate,
        r.closed_form,
        r.lower,
        r.upper,
        if r.pass() { "PASS" } else { "FAIL" }
    );
    if r.pass() {
        Ok(())
    } else {
        Err(CliError::Numerical("estimate outside the accepted interval".into()))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs, s: &Settings) -> Result<()> {
    let results = run_suite(seed(a.seed, s)?).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<14} rel_err {:.3e}  tol {:.0e}  {}",
            r.name,
            r.rel_err,
            r.tolerance,
            if r.pass() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.pass());
    }
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    match &cli.command {
        Command::Register(a) => cmd_register(a, &settings),
        Command::Warp(a) => cmd_warp(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::MiSelftest(a) => cmd_selftest(a, &settings),
        Command::Gradcheck(a) => cmd_gradcheck(a, &settings),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
