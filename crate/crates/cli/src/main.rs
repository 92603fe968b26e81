use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use enkf_rare::enkf::Localization;
use enkf_rare::harness::{crude_monte_carlo, emit_fig1_data, run_batch, ExperimentConfig};
use enkf_rare::lsf::problem;
use enkf_rare::mixtures::Family;
use enkf_rare::theory::{
    integrate_particle_flow, limit_mean, predicted_moments, write_trajectory_csv, InitMode, TheoryScenario,
};
use enkf_rare::rng_from_seed;

#[derive(Parser)]
#[command(name = "enkf-rare", version, about = "Failure probability estimation with the ensemble Kalman filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Repeated seeded trials on one problem.
    Run(RunArgs),
    /// Noise-free particle flow for an affine limit-state.
    Theory(TheoryArgs),
    /// Smoothed failure indicators for a set of temperatures.
    Curves(CurvesArgs),
    /// Crude Monte Carlo reference probability.
    Mc(McArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// convex, parabolic, series, diffusion1d or affine(a1,...,ad,b)
    #[arg(long)]
    problem: Option<String>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long)]
    delta_target: Option<f64>,
    #[arg(long)]
    family: Option<Family>,
    /// Mixture components for the importance density.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Fixed distance localization; bandwidth from --alpha or the dimension.
    #[arg(long)]
    local: bool,
    #[arg(long)]
    alpha: Option<f64>,
    /// Localization from the covariances of this many clusters.
    #[arg(long = "adaptive-K")]
    adaptive_k: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for trials.csv, summary.json and model.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run trials sequentially.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    reference_pf: Option<f64>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    b: f64,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long = "J", default_value_t = 10_000)]
    j: usize,
    #[arg(long, default_value_t = 5.0)]
    t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// no-failure, no-failure-rejection or with-failure
    #[arg(long, default_value = "no-failure")]
    mode: String,
    /// Recording times, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 5.0])]
    times: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1, 1.0])]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    g_min: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    g_max: f64,
    #[arg(long, default_value_t = 401)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    problem: String,
    #[arg(long, default_value_t = 1_000_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn experiment(args: RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.problem {
        cfg.problem = v;
    }
    if let Some(v) = args.j {
        cfg.j = v;
    }
    if let Some(v) = args.delta_target {
        cfg.delta_target = v;
    }
    if let Some(v) = args.family {
        cfg.family = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(k) = args.adaptive_k {
        if args.local {
            bail!("--local and --adaptive-K are mutually exclusive");
        }
        cfg.localization = Localization::Adaptive { k };
    } else if args.local || args.alpha.is_some() {
        cfg.localization = match args.alpha {
            Some(alpha) => Localization::Fixed { alpha },
            None => Localization::scaled_with_dimension(1.0, problem(&cfg.problem)?.dim()),
        };
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.seed {
        cfg.base_seed = v;
    }
    if args.out.is_some() {
        cfg.out_dir = args.out;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    if args.reference_pf.is_some() {
        cfg.reference_pf = args.reference_pf;
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = experiment(args)?;
    let out = run_batch(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    if out.summary.n_errors > 0 {
        eprintln!("{} of {} trials failed", out.summary.n_errors, cfg.trials);
    }
    Ok(())
}

fn theory(args: TheoryArgs) -> Result<()> {
    let mode = match args.mode.as_str() {
        "no-failure" => InitMode::NoFailure,
        "no-failure-rejection" => InitMode::NoFailureRejection,
        "with-failure" => InitMode::WithFailure,
        other => bail!("unknown mode {other}"),
    };
    let sc = TheoryScenario {
        b: args.b,
        d: args.d,
        j: args.j,
        t_end: args.t_end,
        dt: args.dt,
    };
    let tr = integrate_particle_flow(&sc, mode, &args.times, &mut rng_from_seed(args.seed))?;
    write_trajectory_csv(&tr.points, output(&args.out)?)?;
    let last = tr.points.last().expect("trajectory has a start point");
    let (m, c) = predicted_moments(args.b, last.t)?;
    eprintln!(
        "t = {}: m_1 = {:.6} (no-failure prediction {:.6}, limit {:.6}), C_11 = {:.6} (prediction {:.6})",
        last.t,
        last.m1(),
        m,
        limit_mean(args.b, args.d)?[0],
        last.c11(),
        c
    );
    Ok(())
}

fn curves(args: CurvesArgs) -> Result<()> {
    if args.points < 2 || !(args.g_max > args.g_min) {
        bail!("need at least two grid points and g_max > g_min");
    }
    let step = (args.g_max - args.g_min) / (args.points - 1) as f64;
    let grid: Vec<f64> = (0..args.points).map(|i| args.g_min + i as f64 * step).collect();
    emit_fig1_data(&args.sigma, &grid, output(&args.out)?)?;
    Ok(())
}

fn mc(args: McArgs) -> Result<()> {
    let lsf = problem(&args.problem)?;
    let est = crude_monte_carlo(&lsf, args.samples, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&est)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Theory(a) => theory(a),
        Command::Curves(a) => curves(a),
        Command::Mc(a) => mc(a),
    }
}
