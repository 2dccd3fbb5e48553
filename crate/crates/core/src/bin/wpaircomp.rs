use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use wpt_aircomp::channel::sample_channels;
use wpt_aircomp::exec::{with_jobs, Execution};
use wpt_aircomp::experiments::{emit_csv, emit_plot, run_sweep, run_trial, validate, ExperimentConfig};
use wpt_aircomp::joint::{kkt_audit, KktReport};
use wpt_aircomp::numerics::hermitian_eig;
use wpt_aircomp::schemes::Scheme;
use wpt_aircomp::seed::trial_seed;
use wpt_aircomp::Error;

const SEED_ENV: &str = "WPAIRCOMP_SEED";

/// Joint energy beamforming, receive beamforming and power control for
/// wireless powered over-the-air computation.
///
/// Exit status: 0 on success, 1 when an invariant check fails, 2 on a
/// configuration or usage error.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance (first sweep point) with every scheme and print the
    /// solutions and the KKT report as JSON.
    Solve(Common),
    /// Run the configured sweep and write <name>.csv and <name>.svg.
    Sweep(Common),
    /// Audit the joint design on seeded instances and print pass/fail lines.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; the built-in power sweep when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed. Overrides WPAIRCOMP_SEED, which overrides the config value.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Comma-separated subset of proposed, isotropic, time_division.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<Scheme>>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    Config(String),
    Invariant(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Shape(_) => Failure::Config(e.to_string()),
            Error::Io { .. } => Failure::Runtime(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(e.to_string()),
            other => Failure::from(other),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &common.schemes {
        cfg.schemes = s.clone();
    }
    cfg.check()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Serialize)]
struct SolveOutput {
    scheme: Scheme,
    mse: f64,
    b_tilde: Vec<f64>,
    harvested: Vec<f64>,
    covariance_eigenvalues: Vec<f64>,
    receiver_norm: f64,
    iterations: Option<usize>,
    converged: Option<bool>,
    kkt: Option<KktReport>,
}

fn solve(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let setup = cfg.point(0)?;
    let p = setup.params;
    let seed = trial_seed(cfg.seed, 0, 0);
    let ch = sample_channels(&p, &cfg.model(), &setup.distances_m, cfg.rician_kappa, seed)?;
    let results = run_trial(&cfg.schemes, &p, &ch, &cfg, &cfg.joint_options(), seed);
    let mut out = Vec::new();
    for (scheme, r) in results {
        let r = r.ok_or_else(|| Failure::Runtime(format!("{scheme} failed on seed {seed}")))?;
        let kkt = match r.report.as_ref().and_then(|rep| rep.dual.as_ref()) {
            Some(d) => Some(kkt_audit(&r.solution, d, &ch, &p)?),
            None => None,
        };
        out.push(SolveOutput {
            scheme,
            mse: r.mse,
            b_tilde: r.solution.b_tilde.clone(),
            harvested: r.harvested.clone(),
            covariance_eigenvalues: hermitian_eig(&r.solution.s).values.to_vec(),
            receiver_norm: r.solution.w.norm(),
            iterations: r.report.as_ref().map(|x| x.iterations),
            converged: r.report.as_ref().map(|x| x.converged),
            kkt,
        });
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("solve output serializes"));
    Ok(())
}

fn sweep(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let result = with_jobs(common.jobs, || run_sweep(&cfg, Execution::Parallel))??;
    create_dir(&common.out)?;
    let csv = common.out.join(format!("{}.csv", cfg.name));
    let svg = common.out.join(format!("{}.svg", cfg.name));
    emit_csv(&result, &csv)?;
    emit_plot(&result, &svg)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn run_validate(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let report = with_jobs(common.jobs, || validate(&cfg, Execution::Parallel))??;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Invariant("one or more invariant checks failed".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(c) => solve(c),
        Command::Sweep(c) => sweep(c),
        Command::Validate(c) => run_validate(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
