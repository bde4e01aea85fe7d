//! Round-trip reconstruction runs and efficiency sweeps over a worker pool.
//!
//! Every trial derives its own stream id from the experiment seed, owns its
//! predictor instance, and is independent of execution order; aggregation
//! happens sequentially over the collected rows so reports are reproducible
//! byte for byte (wall-clock columns aside).

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::dynamics::ddim_denoise;
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, ModelInstance, ModelSpec};
use crate::harness::metrics::{mean_std, MethodAggregate, MetricsReport, TrialFailure, TrialRow};
use crate::inversion::{invert, InversionMethod};
use crate::models::{ErrorModel, GaussianMixture, NoisePredictor, PerturbedPredictor};
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::seeding;

fn build_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("INVLAB_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| {
            Error::Config(format!("INVLAB_THREADS must be a positive integer, got `{v}`"))
        })?;
        if n == 0 {
            return Err(Error::Config("INVLAB_THREADS must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn instance_seed(config_seed: u64, trial: usize) -> u64 {
    seeding::mix(config_seed, &[seeding::fnv1a64("instance"), trial as u64])
}

struct TrialResult {
    row: TrialRow,
    per_step_dev: Vec<f64>,
}

fn run_trial(
    config: &ExperimentConfig,
    method: InversionMethod,
    method_name: &str,
    schedule: &Arc<NoiseSchedule>,
    grid: &TimestepGrid,
    shared_gmm: Option<&GaussianMixture>,
    trial: usize,
) -> Result<TrialResult> {
    let stream = instance_seed(config.seed, trial);
    let mut rng = seeding::rng_from(stream, &[seeding::fnv1a64("z0")]);
    let instance = ModelInstance::for_trial(&config.model, shared_gmm, config.dim, stream)?;
    let z0 = instance.sample_z0(config.dim, &mut rng)?;

    let base = instance.predictor(Arc::clone(schedule))?;
    let predictor: Box<dyn NoisePredictor> = match &config.error_model {
        Some(spec) => {
            // one error stream per trial, shared by every method so the
            // comparison is paired
            let error_seed = seeding::mix(config.seed, &[seeding::fnv1a64("error-injection")]);
            let model = ErrorModel::new(spec.gamma.clone(), spec.rho, error_seed)?;
            Box::new(PerturbedPredictor::new(
                base,
                Arc::clone(schedule),
                grid,
                &model,
                trial as u64,
                config.dim,
            )?)
        }
        None => base,
    };

    let nfe_before = predictor.nfe();
    let started = Instant::now();
    let inv = invert(method, predictor.as_ref(), schedule, grid, &z0)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let nfe = predictor.nfe() - nfe_before;

    let den = ddim_denoise(predictor.as_ref(), schedule, grid, inv.terminal())?;
    let recon = den.terminal();
    let peak = 6.0 * instance.coordinate_std();
    let mse = super::metrics::mse(&z0, recon)?;
    let psnr = super::metrics::psnr(&z0, recon, peak)?;

    let per_step_dev = (0..=grid.n_steps())
        .map(|i| {
            inv.latent(i)
                .sub(den.latent(i))
                .map(|d| d.l2_norm())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TrialResult {
        row: TrialRow {
            method: method_name.to_string(),
            trial,
            seed: stream,
            nfe,
            mse,
            psnr,
            wall_ms,
        },
        per_step_dev,
    })
}

fn run_methods(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let methods = config.parsed_methods()?;
    let schedule = Arc::new(config.schedule.build()?);
    let grid = config.grid.build(&schedule)?;
    let shared_gmm = match &config.model {
        ModelSpec::Gmm { path } => Some(GaussianMixture::from_json_file(path)?),
        _ => None,
    };
    let pool = build_pool()?;

    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    let mut failures = Vec::new();
    for method in &methods {
        let canonical = method.to_string();
        let outcomes: Vec<std::result::Result<TrialResult, String>> = pool.install(|| {
            (0..config.trials)
                .into_par_iter()
                .map(|trial| {
                    run_trial(
                        config,
                        *method,
                        &canonical,
                        &schedule,
                        &grid,
                        shared_gmm.as_ref(),
                        trial,
                    )
                    .map_err(|e| e.to_string())
                })
                .collect()
        });

        let mut ok = Vec::new();
        for (trial, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(r) => ok.push(r),
                Err(error) => failures.push(TrialFailure {
                    method: canonical.clone(),
                    trial,
                    error,
                }),
            }
        }

        let (mse_mean, mse_std) = mean_std(&ok.iter().map(|r| r.row.mse).collect::<Vec<_>>());
        let (psnr_mean, psnr_std) = mean_std(&ok.iter().map(|r| r.row.psnr).collect::<Vec<_>>());
        let (nfe_mean, _) = mean_std(&ok.iter().map(|r| r.row.nfe as f64).collect::<Vec<_>>());
        let (wall_mean, _) = mean_std(&ok.iter().map(|r| r.row.wall_ms).collect::<Vec<_>>());
        let mut per_step_deviation = vec![0.0; grid.n_steps() + 1];
        if !ok.is_empty() {
            for r in &ok {
                for (acc, d) in per_step_deviation.iter_mut().zip(&r.per_step_dev) {
                    *acc += d;
                }
            }
            for acc in &mut per_step_deviation {
                *acc /= ok.len() as f64;
            }
        }
        aggregates.push(MethodAggregate {
            method: canonical.clone(),
            trials_ok: ok.len(),
            failures: config.trials - ok.len(),
            nfe_mean,
            mse_mean,
            mse_std,
            psnr_mean,
            psnr_std,
            wall_ms_mean: wall_mean,
            per_step_deviation,
        });
        rows.extend(ok.into_iter().map(|r| r.row));
    }

    Ok(MetricsReport {
        dim: config.dim,
        steps: config.grid.steps,
        seed: config.seed,
        rows,
        aggregates,
        failures,
    })
}

/// Round-trip reconstruction experiment: for each configured method and
/// trial, invert a fresh data sample, denoise back, and score the
/// reconstruction.
pub fn run_roundtrip(config: &ExperimentConfig) -> Result<MetricsReport> {
    run_methods(config)
}

/// Efficiency sweep: same engine as the round-trip run; intended for method
/// lists that sweep the fixed-point iteration budget against the
/// estimator-guided method. One aggregate row per method.
pub fn run_bench(config: &ExperimentConfig) -> Result<MetricsReport> {
    run_methods(config)
}

/// Inverts trial 0 once per method and writes each trajectory as JSON lines
/// under `dir`.
pub fn dump_first_trial_trajectories(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let methods = config.parsed_methods()?;
    let schedule = Arc::new(config.schedule.build()?);
    let grid = config.grid.build(&schedule)?;
    let shared_gmm = match &config.model {
        ModelSpec::Gmm { path } => Some(GaussianMixture::from_json_file(path)?),
        _ => None,
    };
    for method in methods {
        let canonical = method.to_string();
        let stream = instance_seed(config.seed, 0);
        let mut rng = seeding::rng_from(stream, &[seeding::fnv1a64("z0")]);
        let instance = ModelInstance::for_trial(&config.model, shared_gmm.as_ref(), config.dim, stream)?;
        let z0 = instance.sample_z0(config.dim, &mut rng)?;
        let predictor = instance.predictor(Arc::clone(&schedule))?;
        let traj = invert(method, predictor.as_ref(), &schedule, &grid, &z0)?;
        let name: String = canonical
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        let file = std::fs::File::create(dir.join(format!("{name}.jsonl")))?;
        traj.write_jsonl(std::io::BufWriter::new(file))?;
    }
    Ok(())
}
