//! Estimator diagnostics: per-step estimation errors under injected
//! data-prediction noise, bias/variance statistics with closed-form
//! cross-checks, and histogram construction.
//!
//! Ground truth per step is built directly from the explicit fixed-point
//! recursion with the sampled errors, so the estimator error formulas hold
//! as exact identities and Monte Carlo moments can be tested against them.

use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{ife_estimate, no_approx_estimate, PredictionError};
use crate::latent::Latent;
use crate::models::{ErrorModel, GammaSchedule};
use crate::schedule::{NoiseSchedule, StepCoefficients, TimestepGrid};
use crate::seeding;

/// Which fixed-point estimator an error sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// The previous latent itself, as naive reversal uses it.
    DdimPrev,
    /// Estimate with the previous step's error substituted in.
    Ife,
    /// Estimate with the error term dropped.
    NoApprox,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EstimatorKind::DdimPrev => "ddim-prev",
            EstimatorKind::Ife => "ife",
            EstimatorKind::NoApprox => "no-approx",
        };
        f.write_str(s)
    }
}

/// One estimation-error sample.
#[derive(Debug, Clone)]
pub struct EstimationError {
    pub delta: Latent,
    pub step_index: usize,
    pub estimator: EstimatorKind,
}

/// `z_true - z_est`, elementwise.
pub fn estimation_error(z_true: &Latent, z_est: &Latent) -> Result<Latent> {
    z_true.sub(z_est)
}

pub(crate) fn ddim_bias_mean_from_coeffs(
    c: &StepCoefficients,
    z_prev: &Latent,
    z0: &Latent,
) -> Result<Latent> {
    z_prev.scale(c.r - 1.0).add_scaled(c.eta * c.s, z0)
}

/// Closed-form mean of the naive estimator's error at step `i`:
/// `(r - 1) * z_prev + eta * s * z0`.
pub fn ddim_bias_mean(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    z0: &Latent,
) -> Result<Latent> {
    grid.check_schedule(schedule)?;
    grid.check_step(i)?;
    let c = StepCoefficients::from_alpha_bars(
        schedule.alpha_bar(grid.timestep(i - 1))?,
        schedule.alpha_bar(grid.timestep(i))?,
    )?;
    ddim_bias_mean_from_coeffs(&c, z_prev, z0)
}

/// Per-coordinate error variance each estimator produces at one step.
///
/// The full estimator sees the difference of two correlated errors, so its
/// variance carries the covariance term; the no-approximation variant and
/// the naive estimator see a single error.
pub fn theory_variance(
    estimator: EstimatorKind,
    eta: f64,
    abar: f64,
    gamma_i: f64,
    gamma_prev: f64,
    rho: f64,
) -> f64 {
    let scale = eta * eta * abar;
    match estimator {
        EstimatorKind::Ife => {
            scale * (gamma_i + gamma_prev - 2.0 * rho * (gamma_i * gamma_prev).sqrt())
        }
        EstimatorKind::NoApprox | EstimatorKind::DdimPrev => scale * gamma_i,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn total_count(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// CSV with columns `bin_left,bin_right,count`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin_left", "bin_right", "count"])?;
        for b in &self.bins {
            wtr.write_record([b.left.to_string(), b.right.to_string(), b.count.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Equal-width histogram over `range` (default: sample min..max). Samples
/// falling outside an explicit range are clamped to the edge bins so counts
/// are conserved.
pub fn histogram(samples: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidParams("histogram needs bins >= 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram samples".into()));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidParams(format!(
                    "bad histogram range [{lo}, {hi}]"
                )));
            }
            (lo, hi)
        }
        None => {
            let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in samples {
        let idx = if width == 0.0 {
            0
        } else {
            (((v - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize
        };
        counts[idx] += 1;
    }
    let bins_out = counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            left: lo + k as f64 * width,
            right: if k + 1 == bins {
                hi
            } else {
                lo + (k + 1) as f64 * width
            },
            count,
        })
        .collect();
    Ok(Histogram { bins: bins_out })
}

/// Mergeable first/second-moment accumulator (Chan et al. parallel update).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / total as f64;
        self.mean += delta * other.count as f64 / total as f64;
        self.count = total;
    }

    /// Unbiased sample variance (n - 1 denominator).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Second moment about zero; the mean-squared-error view of the spread.
    pub fn mse_about_zero(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 + self.mean * self.mean * self.count as f64) / self.count as f64
        }
    }
}

/// Configuration for an estimation-error measurement run.
#[derive(Debug, Clone)]
pub struct StatsConfig {
    pub schedule: NoiseSchedule,
    pub grid: TimestepGrid,
    pub dim: usize,
    pub trials: usize,
    pub gamma: GammaSchedule,
    pub rho: f64,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub bins: usize,
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.check_schedule(&self.schedule)?;
        if self.dim == 0 || self.trials == 0 {
            return Err(Error::Config("stats need dim >= 1 and trials >= 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("stats need at least one estimator".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("stats need bins >= 1".into()));
        }
        if self.grid.n_steps() < 2 {
            return Err(Error::Config(
                "stats need a grid with at least 2 steps".into(),
            ));
        }
        ErrorModel::new(self.gamma.clone(), self.rho, self.seed)?;
        Ok(())
    }
}

/// Per-step summary of one estimator's error samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub i: usize,
    pub t: usize,
    /// Mean over trials and coordinates.
    pub mean: f64,
    /// Unbiased sample variance over trials and coordinates.
    pub variance: f64,
    /// Second moment about zero.
    pub mse_about_zero: f64,
    pub per_coord_mean: Vec<f64>,
    pub theory_variance: Option<f64>,
    /// Closed-form error mean for the naive estimator; zero vector for the
    /// unbiased estimators.
    pub theory_mean: Option<Vec<f64>>,
    /// Per-coordinate error histogram; counts sum to trials x dim.
    pub coord_hist: Histogram,
}

/// One estimator's full report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub estimator: EstimatorKind,
    pub per_step: Vec<StepStats>,
    /// Moments pooled over steps, trials, and coordinates.
    pub pooled: Moments,
    pub pooled_mse_about_zero: f64,
    /// Histogram of per-trial error means (pooled over steps and coordinates).
    pub hist_trial_mean: Histogram,
    /// Histogram of per-trial error variances.
    pub hist_trial_var: Histogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub trials: usize,
    pub dim: usize,
    pub rho: f64,
    pub seed: u64,
    /// Grid positions the estimators are measured on (`2..=N`; the first
    /// step has no previous error to substitute).
    pub steps: Vec<usize>,
    pub estimators: Vec<EstimatorStats>,
}

impl StatsReport {
    pub fn estimator(&self, kind: EstimatorKind) -> Option<&EstimatorStats> {
        self.estimators.iter().find(|e| e.estimator == kind)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct TrialSamples {
    /// `[estimator][step][coord]`, steps indexed from `i = 2`.
    deltas: Vec<Vec<Vec<f64>>>,
}

/// Samples estimation errors for each configured estimator.
///
/// Each trial draws one error chain, builds the true latent sequence from
/// the explicit fixed-point recursion, and records `z_true - estimate` per
/// step. The reference data latent is drawn once per run, so the naive
/// estimator's closed-form mean is a fixed vector the Monte Carlo mean can
/// be tested against.
pub fn run_error_stats(config: &StatsConfig) -> Result<StatsReport> {
    config.validate()?;
    let n = config.grid.n_steps();
    let dim = config.dim;
    let steps: Vec<usize> = (2..=n).collect();
    let error_model = ErrorModel::new(config.gamma.clone(), config.rho, config.seed)?;

    let mut z0_rng = seeding::rng_from(config.seed, &[seeding::fnv1a64("stats-z0")]);
    let z0 = Latent::from_raw(
        (0..dim)
            .map(|_| rand::Rng::sample::<f64, _>(&mut z0_rng, StandardNormal))
            .collect(),
        vec![dim],
    );

    let coeffs: Vec<StepCoefficients> = (1..=n)
        .map(|i| {
            StepCoefficients::from_alpha_bars(
                config.schedule.alpha_bar(config.grid.timestep(i - 1))?,
                config.schedule.alpha_bar(config.grid.timestep(i))?,
            )
        })
        .collect::<Result<_>>()?;

    // zero-error trajectory; the expected latent sequence
    let mut zbar = vec![z0.clone()];
    for c in &coeffs {
        let next = zbar
            .last()
            .expect("non-empty")
            .scale(c.r)
            .add_scaled(c.eta * c.s, &z0)?;
        zbar.push(next);
    }

    let per_trial: Vec<TrialSamples> = (0..config.trials)
        .into_par_iter()
        .map(|trial| sample_trial(config, &error_model, &coeffs, &z0, trial as u64))
        .collect::<Result<Vec<_>>>()?;

    let mut estimators = Vec::with_capacity(config.estimators.len());
    for (e_idx, &kind) in config.estimators.iter().enumerate() {
        let mut per_step = Vec::with_capacity(steps.len());
        for (s_idx, &i) in steps.iter().enumerate() {
            let c = &coeffs[i - 1];
            let gamma_i = error_model.gamma_at(i)?;
            let gamma_prev = error_model.gamma_at(i - 1)?;
            let mut moments = Moments::default();
            let mut per_coord_mean = vec![0.0; dim];
            let mut values = Vec::with_capacity(config.trials * dim);
            for t in &per_trial {
                for (d, &v) in t.deltas[e_idx][s_idx].iter().enumerate() {
                    moments.push(v);
                    per_coord_mean[d] += v;
                    values.push(v);
                }
            }
            for m in &mut per_coord_mean {
                *m /= config.trials as f64;
            }
            let theory_var = Some(theory_variance(
                kind,
                c.eta,
                c.s * c.s,
                gamma_i,
                gamma_prev,
                config.rho,
            ));
            let theory_mean = Some(match kind {
                EstimatorKind::DdimPrev => {
                    ddim_bias_mean_from_coeffs(c, &zbar[i - 1], &z0)?.values().to_vec()
                }
                _ => vec![0.0; dim],
            });
            per_step.push(StepStats {
                i,
                t: config.grid.timestep(i),
                mean: moments.mean,
                variance: moments.variance(),
                mse_about_zero: moments.mse_about_zero(),
                per_coord_mean,
                theory_variance: theory_var,
                theory_mean,
                coord_hist: histogram(&values, config.bins, None)?,
            });
        }

        let mut pooled = Moments::default();
        let mut trial_means = Vec::with_capacity(config.trials);
        let mut trial_vars = Vec::with_capacity(config.trials);
        for t in &per_trial {
            let mut local = Moments::default();
            for step in &t.deltas[e_idx] {
                for &v in step {
                    local.push(v);
                }
            }
            trial_means.push(local.mean);
            trial_vars.push(local.variance());
            pooled.merge(&local);
        }
        estimators.push(EstimatorStats {
            estimator: kind,
            per_step,
            pooled,
            pooled_mse_about_zero: pooled.mse_about_zero(),
            hist_trial_mean: histogram(&trial_means, config.bins, None)?,
            hist_trial_var: histogram(&trial_vars, config.bins, None)?,
        });
    }

    Ok(StatsReport {
        trials: config.trials,
        dim,
        rho: config.rho,
        seed: config.seed,
        steps,
        estimators,
    })
}

fn sample_trial(
    config: &StatsConfig,
    error_model: &ErrorModel,
    coeffs: &[StepCoefficients],
    z0: &Latent,
    trial: u64,
) -> Result<TrialSamples> {
    let n = config.grid.n_steps();
    let chain = error_model.sample_errors(trial, n, config.dim)?;

    // true latents from the explicit recursion with the sampled errors
    let mut z_true = Vec::with_capacity(n + 1);
    z_true.push(z0.clone());
    for i in 1..=n {
        let c = &coeffs[i - 1];
        let shifted = z0.add(&chain[i])?;
        let next = z_true[i - 1].scale(c.r).add_scaled(c.eta * c.s, &shifted)?;
        z_true.push(next);
    }

    let mut deltas = vec![Vec::with_capacity(n - 1); config.estimators.len()];
    for i in 2..=n {
        for (e_idx, kind) in config.estimators.iter().enumerate() {
            let estimate = match kind {
                EstimatorKind::DdimPrev => z_true[i - 1].clone(),
                EstimatorKind::Ife => ife_estimate(
                    &config.schedule,
                    &config.grid,
                    i,
                    &z_true[i - 1],
                    z0,
                    &PredictionError {
                        e: chain[i - 1].clone(),
                        step_index: i - 1,
                    },
                )?,
                EstimatorKind::NoApprox => {
                    no_approx_estimate(&config.schedule, &config.grid, i, &z_true[i - 1], z0)?
                }
            };
            let delta = estimation_error(&z_true[i], &estimate)?;
            deltas[e_idx].push(delta.values().to_vec());
        }
    }
    Ok(TrialSamples { deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use approx::assert_relative_eq;

    fn small_config(trials: usize, gamma: f64, rho: f64) -> StatsConfig {
        let schedule = NoiseSchedule::default_scaled_linear();
        let grid = TimestepGrid::uniform(&schedule, 20, 1).unwrap();
        StatsConfig {
            schedule,
            grid,
            dim: 8,
            trials,
            gamma: GammaSchedule::Constant(gamma),
            rho,
            seed: 42,
            estimators: vec![
                EstimatorKind::DdimPrev,
                EstimatorKind::Ife,
                EstimatorKind::NoApprox,
            ],
            bins: 50,
        }
    }

    #[test]
    fn estimation_error_basics() {
        let a = Latent::from_vec(vec![1.0, 2.0]).unwrap();
        let b = Latent::from_vec(vec![0.0, 2.0]).unwrap();
        assert_eq!(estimation_error(&a, &a).unwrap().values(), &[0.0, 0.0]);
        assert_eq!(estimation_error(&a, &b).unwrap().values(), &[1.0, 0.0]);
        let c = Latent::from_vec(vec![1.0]).unwrap();
        assert!(estimation_error(&a, &c).is_err());
    }

    #[test]
    fn ddim_bias_mean_zeros_and_flat_pair() {
        let s = NoiseSchedule::default_scaled_linear();
        let g = TimestepGrid::uniform(&s, 10, 1).unwrap();
        let z = Latent::zeros(3);
        let m = ddim_bias_mean(&s, &g, 4, &z, &z).unwrap();
        assert_eq!(m.values(), &[0.0; 3]);

        // equal adjacent coefficients: both terms vanish
        let c = StepCoefficients::from_alpha_bars(0.5, 0.5).unwrap();
        let z_prev = Latent::from_vec(vec![1.0, -2.0]).unwrap();
        let z0 = Latent::from_vec(vec![0.5, 0.5]).unwrap();
        let m = ddim_bias_mean_from_coeffs(&c, &z_prev, &z0).unwrap();
        assert!(m.linf_norm() < 1e-14);
    }

    #[test]
    fn theory_variance_limits() {
        // perfect correlation with equal gammas cancels
        assert_eq!(
            theory_variance(EstimatorKind::Ife, -0.5, 0.3, 0.01, 0.01, 1.0),
            0.0
        );
        // independence doubles the single-error variance
        let ife = theory_variance(EstimatorKind::Ife, -0.5, 0.3, 0.01, 0.01, 0.0);
        let noapp = theory_variance(EstimatorKind::NoApprox, -0.5, 0.3, 0.01, 0.01, 0.0);
        assert_relative_eq!(ife / noapp, 2.0, max_relative = 1e-12);
        // rho = 0.75 halves it
        let ife = theory_variance(EstimatorKind::Ife, -0.5, 0.3, 0.01, 0.01, 0.75);
        assert_relative_eq!(ife / noapp, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn histogram_single_sample() {
        let h = histogram(&[1.5], 1, None).unwrap();
        assert_eq!(h.bins.len(), 1);
        assert_eq!(h.bins[0].count, 1);
        assert_eq!(h.total_count(), 1);
    }

    #[test]
    fn histogram_uniform_grid() {
        // bin-center samples keep the count away from boundary rounding
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let h = histogram(&samples, 10, Some((0.0, 1.0))).unwrap();
        assert!(h.bins.iter().all(|b| b.count == 10), "{:?}", h.bins);
        assert_eq!(h.total_count(), 100);
    }

    #[test]
    fn histogram_input_validation() {
        assert!(matches!(histogram(&[], 5, None), Err(Error::EmptySamples)));
        assert!(histogram(&[1.0], 0, None).is_err());
        assert!(histogram(&[1.0], 2, Some((2.0, 1.0))).is_err());
    }

    #[test]
    fn histogram_gaussian_cells_match_analytic_probabilities() {
        // multinomial oracle: expected counts from the normal CDF, 5 sigma bounds
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = 100_000usize;
        let mut rng = seeding::rng_from(7, &[99]);
        let samples: Vec<f64> = (0..n)
            .map(|_| rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
            .collect();
        let (lo, hi) = (-4.0, 4.0);
        let bins = 16;
        let h = histogram(&samples, bins, Some((lo, hi))).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let width = (hi - lo) / bins as f64;
        for (k, bin) in h.bins.iter().enumerate() {
            let left = lo + k as f64 * width;
            let right = left + width;
            // clamping folds the tails into the edge bins
            let p = if k == 0 {
                normal.cdf(right)
            } else if k == bins - 1 {
                1.0 - normal.cdf(left)
            } else {
                normal.cdf(right) - normal.cdf(left)
            };
            let expect = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (bin.count as f64 - expect).abs() <= 5.0 * sd.max(1.0),
                "bin {k}: count {} expect {expect:.1} sd {sd:.1}",
                bin.count
            );
        }
        assert_eq!(h.total_count(), n as u64);
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut all = Moments::default();
        for &x in &xs {
            all.push(x);
        }
        let mut left = Moments::default();
        let mut right = Moments::default();
        for &x in &xs[..400] {
            left.push(x);
        }
        for &x in &xs[400..] {
            right.push(x);
        }
        left.merge(&right);
        assert_eq!(left.count, all.count);
        assert_relative_eq!(left.mean, all.mean, max_relative = 1e-12);
        assert_relative_eq!(left.variance(), all.variance(), max_relative = 1e-10);
    }

    #[test]
    fn zero_gamma_collapses_unbiased_estimators_to_a_point_mass() {
        let cfg = small_config(50, 0.0, 0.0);
        let report = run_error_stats(&cfg).unwrap();
        for kind in [EstimatorKind::Ife, EstimatorKind::NoApprox] {
            let est = report.estimator(kind).unwrap();
            assert_eq!(est.pooled.mean, 0.0);
            assert_eq!(est.pooled.variance(), 0.0);
            // point mass at zero
            let nonzero: u64 = est
                .hist_trial_mean
                .bins
                .iter()
                .filter(|b| !(b.left <= 0.0 && b.right >= 0.0))
                .map(|b| b.count)
                .sum();
            assert_eq!(nonzero, 0);
        }
    }

    #[test]
    fn per_step_variance_tracks_theory_at_ten_k_trials() {
        let cfg = small_config(10_000, 0.01, 0.75);
        let report = run_error_stats(&cfg).unwrap();
        for kind in [EstimatorKind::Ife, EstimatorKind::NoApprox] {
            let est = report.estimator(kind).unwrap();
            for step in &est.per_step {
                let theory = step.theory_variance.unwrap();
                assert!(theory > 0.0);
                let rel = (step.variance - theory).abs() / theory;
                assert!(
                    rel <= 0.1,
                    "{kind}: step {} variance {} vs theory {theory} (rel {rel})",
                    step.i,
                    step.variance
                );
            }
        }
    }

    #[test]
    fn unbiased_estimators_pass_mean_test() {
        let cfg = small_config(10_000, 0.01, 0.5);
        let report = run_error_stats(&cfg).unwrap();
        let n = cfg.trials as f64;
        for kind in [EstimatorKind::Ife, EstimatorKind::NoApprox] {
            let est = report.estimator(kind).unwrap();
            for step in &est.per_step {
                let bound = 4.0 * (step.theory_variance.unwrap() / n).sqrt();
                for (d, m) in step.per_coord_mean.iter().enumerate() {
                    assert!(
                        m.abs() <= bound,
                        "{kind}: step {} coord {d} mean {m} exceeds {bound}",
                        step.i
                    );
                }
            }
        }
    }

    #[test]
    fn ddim_mean_matches_closed_form() {
        let cfg = small_config(10_000, 0.01, 0.0);
        let report = run_error_stats(&cfg).unwrap();
        let est = report.estimator(EstimatorKind::DdimPrev).unwrap();
        let n = cfg.trials as f64;
        for step in &est.per_step {
            let theory_mean = step.theory_mean.as_ref().unwrap();
            // standard error from the observed spread; the previous latent is
            // itself random, so the conditional variance alone understates it
            let se = (step.variance / n).sqrt();
            for (d, m) in step.per_coord_mean.iter().enumerate() {
                let gap = (m - theory_mean[d]).abs();
                assert!(
                    gap <= 4.0 * se,
                    "step {} coord {d}: mean {} vs closed form {} (gap {gap}, se {se})",
                    step.i,
                    m,
                    theory_mean[d]
                );
            }
        }
    }

    #[test]
    fn variance_ordering_under_strong_correlation() {
        let cfg = small_config(4000, 0.01, 0.9);
        let report = run_error_stats(&cfg).unwrap();
        let ife = report.estimator(EstimatorKind::Ife).unwrap();
        let noapp = report.estimator(EstimatorKind::NoApprox).unwrap();
        let ratio = ife.pooled.variance() / noapp.pooled.variance();
        assert_relative_eq!(ratio, 0.2, max_relative = 0.1);
        // per-trial variance histogram mass sits left of the variant's
        let mean_ife_var: f64 = ife
            .hist_trial_var
            .bins
            .iter()
            .map(|b| (b.left + b.right) / 2.0 * b.count as f64)
            .sum::<f64>()
            / cfg.trials as f64;
        let mean_noapp_var: f64 = noapp
            .hist_trial_var
            .bins
            .iter()
            .map(|b| (b.left + b.right) / 2.0 * b.count as f64)
            .sum::<f64>()
            / cfg.trials as f64;
        assert!(mean_ife_var < mean_noapp_var);
    }

    #[test]
    fn histogram_conservation_per_step() {
        let cfg = small_config(200, 0.01, 0.5);
        let report = run_error_stats(&cfg).unwrap();
        for est in &report.estimators {
            for step in &est.per_step {
                assert_eq!(
                    step.coord_hist.total_count(),
                    (cfg.trials * cfg.dim) as u64
                );
            }
            assert_eq!(est.hist_trial_mean.total_count(), cfg.trials as u64);
        }
    }

    #[test]
    fn stats_run_is_deterministic() {
        let cfg = small_config(100, 0.01, 0.5);
        let a = run_error_stats(&cfg).unwrap();
        let b = run_error_stats(&cfg).unwrap();
        assert_eq!(
            a.to_json_string().unwrap(),
            b.to_json_string().unwrap(),
            "same config and seed must give identical reports"
        );
    }

    #[test]
    fn stats_config_validation() {
        let mut cfg = small_config(10, 0.01, 0.0);
        cfg.estimators.clear();
        assert!(run_error_stats(&cfg).is_err());
        let mut cfg = small_config(10, 0.01, 0.0);
        cfg.trials = 0;
        assert!(run_error_stats(&cfg).is_err());
        let mut cfg = small_config(10, 0.01, 0.0);
        cfg.rho = 1.5;
        assert!(run_error_stats(&cfg).is_err());
    }

    #[test]
    fn small_schedule_guard() {
        let schedule = NoiseSchedule::from_parts(
            ScheduleKind::LinearBeta,
            None,
            vec![0.9, 0.5],
        )
        .unwrap();
        let grid = TimestepGrid::from_indices(&schedule, vec![0, 1]).unwrap();
        let cfg = StatsConfig {
            schedule,
            grid,
            dim: 2,
            trials: 10,
            gamma: GammaSchedule::Constant(0.01),
            rho: 0.0,
            seed: 1,
            estimators: vec![EstimatorKind::Ife],
            bins: 10,
        };
        assert!(run_error_stats(&cfg).is_err(), "N = 1 has no measurable step");
    }
}
