//! Command-line front end for the inversion laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use invlab::analysis::{run_error_stats, EstimatorKind, StatsConfig};
use invlab::error::{Error, Result};
use invlab::harness::{
    dump_first_trial_trajectories, emit_aggregate_csv, emit_csv, parse_config, run_bench,
    run_roundtrip, ErrorModelSpec, ExperimentConfig, MetricsReport, ModelSpec,
};
use invlab::models::GammaSchedule;
use invlab::schedule::{BetaParams, NoiseSchedule, ScheduleKind};

#[derive(Parser)]
#[command(
    name = "invlab",
    version,
    about = "Deterministic diffusion-inversion experiments with exact-score toy models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert sampled data, denoise back, and score the reconstructions.
    Roundtrip(RunArgs),
    /// Efficiency sweep; defaults to fixed-point budgets k=0..4 against ife.
    Bench(RunArgs),
    /// Estimation-error statistics with closed-form cross-checks.
    Stats(StatsArgs),
    /// Build a noise schedule and print or write its JSON table.
    DumpSchedule(DumpArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags below override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    /// Number of inversion steps N.
    #[arg(long)]
    steps: Option<usize>,
    /// Leading timestep offset of the grid.
    #[arg(long)]
    offset: Option<usize>,
    /// Comma-separated method list, e.g. ife,ddim,fp:k=2
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Data model: gaussian[:variance] | gmm:<path> | gmm-random[:components]
    #[arg(long)]
    model: Option<String>,
    /// Enable error injection with this per-step variance.
    #[arg(long)]
    gamma: Option<f64>,
    /// Lag-1 correlation of injected errors.
    #[arg(long)]
    rho: Option<f64>,
    /// Drop any error injection from the config file.
    #[arg(long)]
    no_injection: bool,
    #[arg(long)]
    schedule_kind: Option<String>,
    #[arg(long)]
    model_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Per-trial CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Full JSON report output path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for trial-0 trajectory dumps (JSON lines).
    #[arg(long)]
    trajectories: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    offset: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Comma-separated estimators: ddim-prev,ife,no-approx
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// JSON report output path (stdout summary is always printed).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for per-estimator histogram CSVs.
    #[arg(long)]
    hist_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long, default_value = "scaled-linear-beta")]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    model_steps: usize,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_schedule_kind(s: &str) -> Result<ScheduleKind> {
    match s {
        "linear-beta" => Ok(ScheduleKind::LinearBeta),
        "scaled-linear-beta" => Ok(ScheduleKind::ScaledLinearBeta),
        "cosine" => Ok(ScheduleKind::Cosine),
        _ => Err(Error::Config(format!("unknown schedule kind `{s}`"))),
    }
}

fn parse_model_spec(s: &str) -> Result<ModelSpec> {
    let (head, arg) = match s.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (s, None),
    };
    match head {
        "gaussian" => {
            let variance = match arg {
                Some(a) => a
                    .parse()
                    .map_err(|_| Error::Config(format!("bad gaussian variance `{a}`")))?,
                None => 1.0,
            };
            Ok(ModelSpec::Gaussian { variance })
        }
        "gmm" => match arg {
            Some(p) => Ok(ModelSpec::Gmm {
                path: PathBuf::from(p),
            }),
            None => Err(Error::Config("gmm model needs a path: gmm:<path>".into())),
        },
        "gmm-random" => {
            let components = match arg {
                Some(a) => a
                    .parse()
                    .map_err(|_| Error::Config(format!("bad component count `{a}`")))?,
                None => 3,
            };
            Ok(ModelSpec::GmmRandom { components })
        }
        _ => Err(Error::Config(format!("unknown model spec `{s}`"))),
    }
}

fn load_run_config(args: &RunArgs, default_methods: &[&str]) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => parse_config(path)?,
        None => {
            let mut c = ExperimentConfig::default_with(10, 42, 8);
            c.methods = default_methods.iter().map(|s| s.to_string()).collect();
            c
        }
    };
    if let Some(v) = args.trials {
        config.trials = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.dim {
        config.dim = v;
    }
    if let Some(v) = args.steps {
        config.grid.steps = v;
    }
    if let Some(v) = args.offset {
        config.grid.offset = v;
    }
    if let Some(v) = &args.methods {
        config.methods = v.clone();
    }
    if let Some(v) = &args.model {
        config.model = parse_model_spec(v)?;
    }
    if let Some(v) = &args.schedule_kind {
        config.schedule.kind = parse_schedule_kind(v)?;
    }
    if let Some(v) = args.model_steps {
        config.schedule.model_steps = v;
    }
    if let Some(v) = args.beta_start {
        config.schedule.beta_start = Some(v);
    }
    if let Some(v) = args.beta_end {
        config.schedule.beta_end = Some(v);
    }
    if args.no_injection {
        config.error_model = None;
    }
    if args.gamma.is_some() || args.rho.is_some() {
        let gamma = args.gamma.or_else(|| {
            config.error_model.as_ref().and_then(|em| match em.gamma {
                GammaSchedule::Constant(g) => Some(g),
                GammaSchedule::PerStep(_) => None,
            })
        });
        let rho = args
            .rho
            .or(config.error_model.as_ref().map(|em| em.rho))
            .unwrap_or(0.0);
        config.error_model = Some(ErrorModelSpec {
            gamma: GammaSchedule::Constant(gamma.unwrap_or(0.01)),
            rho,
        });
    }
    if let Some(v) = &args.csv {
        config.output.csv = Some(v.clone());
    }
    if let Some(v) = &args.report {
        config.output.report = Some(v.clone());
    }
    if let Some(v) = &args.trajectories {
        config.output.trajectories = Some(v.clone());
    }
    config.validate()?;
    Ok(config)
}

fn write_outputs(config: &ExperimentConfig, report: &MetricsReport, aggregate_csv: bool) -> Result<()> {
    if let Some(path) = &config.output.csv {
        if aggregate_csv {
            emit_aggregate_csv(report, path)?;
        } else {
            emit_csv(report, path)?;
        }
        eprintln!("wrote {}", path.display());
    }
    if let Some(path) = &config.output.report {
        std::fs::write(path, report.to_json_string()?)?;
        eprintln!("wrote {}", path.display());
    }
    if let Some(dir) = &config.output.trajectories {
        dump_first_trial_trajectories(config, dir)?;
        eprintln!("wrote trajectories under {}", dir.display());
    }
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    println!(
        "{:<24} {:>7} {:>6} {:>12} {:>12} {:>9} {:>10}",
        "method", "trials", "nfe", "mse", "psnr", "fail", "wall_ms"
    );
    for a in &report.aggregates {
        println!(
            "{:<24} {:>7} {:>6.1} {:>12.4e} {:>12.3} {:>9} {:>10.2}",
            a.method, a.trials_ok, a.nfe_mean, a.mse_mean, a.psnr_mean, a.failures, a.wall_ms_mean
        );
    }
}

fn cmd_roundtrip(args: &RunArgs) -> Result<()> {
    let config = load_run_config(args, &["ife", "ddim"])?;
    let report = run_roundtrip(&config)?;
    print_summary(&report);
    write_outputs(&config, &report, false)
}

fn cmd_bench(args: &RunArgs) -> Result<()> {
    let config = load_run_config(
        args,
        &["ife", "fp:k=0", "fp:k=1", "fp:k=2", "fp:k=3", "fp:k=4"],
    )?;
    let report = run_bench(&config)?;
    print_summary(&report);
    write_outputs(&config, &report, true)
}

fn parse_estimators(names: &[String]) -> Result<Vec<EstimatorKind>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "ddim-prev" => Ok(EstimatorKind::DdimPrev),
            "ife" => Ok(EstimatorKind::Ife),
            "no-approx" => Ok(EstimatorKind::NoApprox),
            _ => Err(Error::Config(format!("unknown estimator `{n}`"))),
        })
        .collect()
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default_with(2000, 42, 8),
    };
    let schedule = base.schedule.build()?;
    let mut grid_spec = base.grid;
    if let Some(v) = args.steps {
        grid_spec.steps = v;
    }
    if let Some(v) = args.offset {
        grid_spec.offset = v;
    }
    let grid = grid_spec.build(&schedule)?;
    let gamma = match (args.gamma, &base.error_model) {
        (Some(g), _) => GammaSchedule::Constant(g),
        (None, Some(em)) => em.gamma.clone(),
        (None, None) => GammaSchedule::Constant(0.01),
    };
    let rho = args
        .rho
        .or(base.error_model.as_ref().map(|em| em.rho))
        .unwrap_or(0.0);
    let estimators = match &args.estimators {
        Some(names) => parse_estimators(names)?,
        None => vec![
            EstimatorKind::DdimPrev,
            EstimatorKind::Ife,
            EstimatorKind::NoApprox,
        ],
    };
    let config = StatsConfig {
        schedule,
        grid,
        dim: args.dim.unwrap_or(base.dim),
        trials: args.trials.unwrap_or(base.trials),
        gamma,
        rho,
        seed: args.seed.unwrap_or(base.seed),
        estimators,
        bins: args.bins,
    };
    let report = run_error_stats(&config)?;

    println!(
        "{:<12} {:>12} {:>14} {:>14}",
        "estimator", "pooled mean", "pooled var", "mse(0)"
    );
    for est in &report.estimators {
        println!(
            "{:<12} {:>12.4e} {:>14.6e} {:>14.6e}",
            est.estimator.to_string(),
            est.pooled.mean,
            est.pooled.variance(),
            est.pooled_mse_about_zero
        );
    }
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json_string()?)?;
        eprintln!("wrote {}", path.display());
    }
    if let Some(dir) = &args.hist_dir {
        std::fs::create_dir_all(dir)?;
        for est in &report.estimators {
            let tag = est.estimator.to_string();
            let mean_path = dir.join(format!("{tag}_trial_mean.csv"));
            est.hist_trial_mean
                .write_csv(std::fs::File::create(&mean_path)?)?;
            let var_path = dir.join(format!("{tag}_trial_var.csv"));
            est.hist_trial_var
                .write_csv(std::fs::File::create(&var_path)?)?;
        }
        eprintln!("wrote histograms under {}", dir.display());
    }
    Ok(())
}

fn cmd_dump_schedule(args: &DumpArgs) -> Result<()> {
    let kind = parse_schedule_kind(&args.kind)?;
    let params = match (args.beta_start, args.beta_end) {
        (None, None) => None,
        (bs, be) => {
            let d = BetaParams::default();
            Some(BetaParams {
                beta_start: bs.unwrap_or(d.beta_start),
                beta_end: be.unwrap_or(d.beta_end),
            })
        }
    };
    let schedule = NoiseSchedule::build(kind, args.model_steps, params)?;
    let json = schedule.to_json_string();
    match &args.out {
        Some(path) => {
            std::fs::write(path, json)?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Roundtrip(args) => cmd_roundtrip(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Stats(args) => cmd_stats(args),
        Command::DumpSchedule(args) => cmd_dump_schedule(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
