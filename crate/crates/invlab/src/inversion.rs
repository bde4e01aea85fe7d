//! Inversion strategies for the deterministic sampler: naive reversal,
//! fixed-point iteration, an iteration-free fixed-point estimator (IFE),
//! and a high-precision fixed-point oracle used as ground truth in tests.
//!
//! Each inversion step solves the implicit update
//! `z = a * z_prev + b * eps(z, t_i)` for the unknown higher-noise latent.
//! The naive strategy substitutes the previous latent into `eps`; the
//! fixed-point strategy iterates the map; IFE evaluates `eps` once at an
//! explicit estimate of the fixed point built from the previous step's
//! computable data-prediction error.

use crate::dynamics::{data_prediction, Direction, Trajectory};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::models::{Conditioning, NoisePredictor};
use crate::schedule::{NoiseSchedule, StepCoefficients, TimestepGrid};

pub const FIXED_POINT_DEFAULT_TOL: f64 = 1e-6;
pub const ORACLE_DEFAULT_TOL: f64 = 1e-12;
pub const ORACLE_DEFAULT_MAX_ITERS: usize = 1000;

/// Which timestep the naive strategy feeds to the predictor alongside the
/// previous latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsTimeMode {
    /// Evaluate at `(z_prev, t_{i-1})`.
    PrevTime,
    /// Evaluate at `(z_prev, t_i)`; one application of the fixed-point map.
    NextTime,
}

/// An inversion strategy with its knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InversionMethod {
    DdimNaive {
        eps_time: EpsTimeMode,
    },
    FixedPoint {
        extra_iters: usize,
        tol: f64,
    },
    Ife,
    /// IFE with the error term dropped from the fixed-point estimate.
    IfeNoErrorApprox,
    /// IFE starting from the raw data latent instead of the initial estimate.
    IfeNoInitialEstimate,
    Oracle {
        tol: f64,
        max_iters: usize,
    },
}

impl InversionMethod {
    /// Parses a method selector such as `"ddim"`, `"fp:k=3,tol=1e-6"`,
    /// `"ife"`, `"ife-noerr"`, `"ife-noinit"`, or `"oracle"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (head, args) = match spec.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (spec, None),
        };
        let mut kv = Vec::new();
        if let Some(args) = args {
            for part in args.split(',') {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::UnknownMethod(spec.to_string()))?;
                kv.push((k.trim(), v.trim()));
            }
        }
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::UnknownMethod(spec.to_string()))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::UnknownMethod(spec.to_string()))
        };
        match head {
            "ddim" => {
                let mut eps_time = EpsTimeMode::PrevTime;
                for (k, v) in kv {
                    match (k, v) {
                        ("eps", "prev") => eps_time = EpsTimeMode::PrevTime,
                        ("eps", "next") => eps_time = EpsTimeMode::NextTime,
                        _ => return Err(Error::UnknownMethod(spec.to_string())),
                    }
                }
                Ok(Self::DdimNaive { eps_time })
            }
            "fp" => {
                let mut extra_iters = 1;
                let mut tol = FIXED_POINT_DEFAULT_TOL;
                for (k, v) in kv {
                    match k {
                        "k" => extra_iters = parse_usize(v)?,
                        "tol" => tol = parse_f64(v)?,
                        _ => return Err(Error::UnknownMethod(spec.to_string())),
                    }
                }
                if tol <= 0.0 {
                    return Err(Error::InvalidParams("fixed-point tol must be > 0".into()));
                }
                Ok(Self::FixedPoint { extra_iters, tol })
            }
            "ife" if kv.is_empty() => Ok(Self::Ife),
            "ife-noerr" if kv.is_empty() => Ok(Self::IfeNoErrorApprox),
            "ife-noinit" if kv.is_empty() => Ok(Self::IfeNoInitialEstimate),
            "oracle" => {
                let mut tol = ORACLE_DEFAULT_TOL;
                let mut max_iters = ORACLE_DEFAULT_MAX_ITERS;
                for (k, v) in kv {
                    match k {
                        "tol" => tol = parse_f64(v)?,
                        "max_iters" => max_iters = parse_usize(v)?,
                        _ => return Err(Error::UnknownMethod(spec.to_string())),
                    }
                }
                if tol <= 0.0 || max_iters == 0 {
                    return Err(Error::InvalidParams(
                        "oracle needs tol > 0 and max_iters >= 1".into(),
                    ));
                }
                Ok(Self::Oracle { tol, max_iters })
            }
            _ => Err(Error::UnknownMethod(spec.to_string())),
        }
    }
}

impl std::fmt::Display for InversionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::DdimNaive {
                eps_time: EpsTimeMode::PrevTime,
            } => write!(f, "ddim"),
            Self::DdimNaive {
                eps_time: EpsTimeMode::NextTime,
            } => write!(f, "ddim:eps=next"),
            Self::FixedPoint { extra_iters, tol } => write!(f, "fp:k={extra_iters},tol={tol:e}"),
            Self::Ife => write!(f, "ife"),
            Self::IfeNoErrorApprox => write!(f, "ife-noerr"),
            Self::IfeNoInitialEstimate => write!(f, "ife-noinit"),
            Self::Oracle { tol, max_iters } => {
                if *tol == ORACLE_DEFAULT_TOL && *max_iters == ORACLE_DEFAULT_MAX_ITERS {
                    write!(f, "oracle")
                } else {
                    write!(f, "oracle:tol={tol:e},max_iters={max_iters}")
                }
            }
        }
    }
}

/// A data-prediction error recovered from an inversion step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionError {
    pub e: Latent,
    pub step_index: usize,
}

fn coeffs(schedule: &NoiseSchedule, grid: &TimestepGrid, i: usize) -> Result<StepCoefficients> {
    grid.check_step(i)?;
    let abar_prev = schedule.alpha_bar(grid.timestep(i - 1))?;
    let abar_cur = schedule.alpha_bar(grid.timestep(i))?;
    StepCoefficients::from_alpha_bars(abar_prev, abar_cur)
}

/// `a * z_prev + b * eps` — the explicit inversion update once a noise value
/// is chosen.
pub(crate) fn invert_update(a: f64, b: f64, z_prev: &Latent, eps: &Latent) -> Result<Latent> {
    z_prev.scale(a).add_scaled(b, eps)
}

/// One naive inversion step: the implicit noise term is approximated with
/// the previous latent, at either the previous or the current timestep.
/// Spends exactly one predictor evaluation.
pub fn naive_ddim_invert_step(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    mode: EpsTimeMode,
) -> Result<Latent> {
    let (z, _) = naive_step_inner(predictor, schedule, grid, i, z_prev, mode)?;
    Ok(z)
}

fn naive_step_inner(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    mode: EpsTimeMode,
) -> Result<(Latent, Latent)> {
    grid.check_schedule(schedule)?;
    let c = coeffs(schedule, grid, i)?;
    let t_eval = match mode {
        EpsTimeMode::PrevTime => grid.timestep(i - 1),
        EpsTimeMode::NextTime => grid.timestep(i),
    };
    let eps = predictor.predict(z_prev, t_eval, &Conditioning::none())?;
    z_prev.check_same_shape(&eps)?;
    let z = invert_update(c.a, c.b, z_prev, &eps)?;
    Ok((z, eps))
}

struct IterationOutcome {
    z: Latent,
    eps: Latent,
    calls: u64,
    residual: f64,
    converged: bool,
}

fn iterate_step(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    max_applications: usize,
    tol: f64,
) -> Result<IterationOutcome> {
    grid.check_schedule(schedule)?;
    let c = coeffs(schedule, grid, i)?;
    let t_cur = grid.timestep(i);
    let mut current = z_prev.clone();
    let mut residual = f64::INFINITY;
    let mut calls = 0u64;
    let mut eps_last = None;
    for _ in 0..max_applications {
        let eps = predictor.predict(&current, t_cur, &Conditioning::none())?;
        current.check_same_shape(&eps)?;
        let next = invert_update(c.a, c.b, z_prev, &eps)?;
        calls += 1;
        if !next.all_finite() {
            return Err(Error::NonFinite(format!(
                "fixed-point iterate at step {i} after {calls} applications"
            )));
        }
        residual = next.sub(&current)?.linf_norm();
        current = next;
        eps_last = Some(eps);
        if residual < tol {
            break;
        }
    }
    Ok(IterationOutcome {
        z: current,
        eps: eps_last.expect("at least one application"),
        calls,
        residual,
        converged: residual < tol,
    })
}

/// Fixed-point inversion step seeded at the previous latent: applies the
/// implicit map `1 + extra_iters` times, stopping early once successive
/// iterates agree within `tol` in the infinity norm. Predictor evaluations
/// equal the applications performed.
pub fn fixed_point_invert_step(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    extra_iters: usize,
    tol: f64,
) -> Result<Latent> {
    let out = iterate_step(predictor, schedule, grid, i, z_prev, 1 + extra_iters, tol)?;
    Ok(out.z)
}

/// Iterates the step map until successive iterates agree within `tol`,
/// erroring out with the final residual if `max_iters` is exhausted.
/// Intended as a test-time reference with exact predictors.
pub fn oracle_fixed_point(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    tol: f64,
    max_iters: usize,
) -> Result<Latent> {
    let out = iterate_step(predictor, schedule, grid, i, z_prev, max_iters, tol)?;
    if !out.converged {
        return Err(Error::NoConvergence {
            iters: out.calls as usize,
            residual: out.residual,
        });
    }
    Ok(out.z)
}

/// Fixed-point estimate for the first inversion step, where no previous
/// error is computable. The data latent sits at high signal-to-noise, so the
/// error term is dropped outright.
pub fn initial_estimate(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    z0: &Latent,
) -> Result<Latent> {
    grid.check_schedule(schedule)?;
    let c = coeffs(schedule, grid, 1)?;
    z0.scale(c.r).add_scaled(c.eta * c.s, z0)
}

/// Recovers the data-prediction error of step `i - 1` from the two latents
/// it connected:
/// `e = (z_prev - r * z_prev2) / (eta * s) - z0`, with all coefficients
/// taken at step `i - 1`.
///
/// When step `i - 1` was produced by the explicit update with some noise
/// value, this equals the cached-prediction route
/// `data_pred(step i - 1) - z0` identically.
pub fn extract_prev_error(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev2: &Latent,
    z_prev: &Latent,
    z0: &Latent,
) -> Result<PredictionError> {
    grid.check_schedule(schedule)?;
    if i < 2 {
        return Err(Error::OutOfRange {
            what: "error-extraction step",
            index: i,
            len: grid.n_steps() + 1,
        });
    }
    grid.check_step(i)?;
    let c = coeffs(schedule, grid, i - 1)?;
    c.check_eta()?;
    let e = z_prev
        .add_scaled(-c.r, z_prev2)?
        .scale(1.0 / (c.eta * c.s))
        .sub(z0)?;
    Ok(PredictionError {
        e,
        step_index: i - 1,
    })
}

/// Fixed-point estimate for step `i >= 2`, approximating the current
/// data-prediction error with the previous step's:
/// `r * z_prev + eta * s * (z0 + e_prev)`.
pub fn ife_estimate(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    z0: &Latent,
    e_prev: &PredictionError,
) -> Result<Latent> {
    grid.check_schedule(schedule)?;
    if i < 2 {
        return Err(Error::OutOfRange {
            what: "estimate step",
            index: i,
            len: grid.n_steps() + 1,
        });
    }
    let c = coeffs(schedule, grid, i)?;
    let shifted = z0.add(&e_prev.e)?;
    z_prev.scale(c.r).add_scaled(c.eta * c.s, &shifted)
}

/// Fixed-point estimate with the error term dropped:
/// `r * z_prev + eta * s * z0`.
pub fn no_approx_estimate(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_prev: &Latent,
    z0: &Latent,
) -> Result<Latent> {
    grid.check_schedule(schedule)?;
    if i < 2 {
        return Err(Error::OutOfRange {
            what: "estimate step",
            index: i,
            len: grid.n_steps() + 1,
        });
    }
    let c = coeffs(schedule, grid, i)?;
    z_prev.scale(c.r).add_scaled(c.eta * c.s, z0)
}

/// One estimator-guided inversion step: evaluates the predictor once at the
/// estimate `z_hat` and applies the explicit update from `z_prev`.
pub fn ife_invert_step(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_hat: &Latent,
    z_prev: &Latent,
) -> Result<Latent> {
    let (z, _) = estimate_step_inner(predictor, schedule, grid, i, z_hat, z_prev)?;
    Ok(z)
}

fn estimate_step_inner(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
    z_hat: &Latent,
    z_prev: &Latent,
) -> Result<(Latent, Latent)> {
    grid.check_schedule(schedule)?;
    let c = coeffs(schedule, grid, i)?;
    let eps = predictor.predict(z_hat, grid.timestep(i), &Conditioning::none())?;
    z_prev.check_same_shape(&eps)?;
    let z = invert_update(c.a, c.b, z_prev, &eps)?;
    Ok((z, eps))
}

/// Full iteration-free inversion from the data latent `z0` to `z(t_N)`:
/// the initial estimate covers step 1; every later step extracts the
/// previous error, forms the estimate, and spends one predictor evaluation.
/// Total NFE equals `N`.
pub fn ife_invert(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    z0: &Latent,
) -> Result<Trajectory> {
    ife_invert_with_options(predictor, schedule, grid, z0, true, true)
}

/// IFE with its two components toggleable; both on is the full method,
/// `use_error_approx = false` drops the previous-error substitution,
/// `use_initial_estimate = false` starts step 1 from the raw data latent.
pub fn ife_invert_with_options(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    z0: &Latent,
    use_initial_estimate: bool,
    use_error_approx: bool,
) -> Result<Trajectory> {
    grid.check_schedule(schedule)?;
    let n = grid.n_steps();
    let mut builder = InversionBuilder::new(schedule, grid, z0);
    let z_hat = if use_initial_estimate {
        initial_estimate(schedule, grid, z0)?
    } else {
        z0.clone()
    };
    let (z1, eps1) = estimate_step_inner(predictor, schedule, grid, 1, &z_hat, z0)?;
    builder.push(1, z1, eps1, 1)?;
    for i in 2..=n {
        let z_hat = if use_error_approx {
            let e = extract_prev_error(
                schedule,
                grid,
                i,
                builder.latent(i - 2),
                builder.latent(i - 1),
                z0,
            )?;
            ife_estimate(schedule, grid, i, builder.latent(i - 1), z0, &e)?
        } else {
            no_approx_estimate(schedule, grid, i, builder.latent(i - 1), z0)?
        };
        let (z, eps) = estimate_step_inner(predictor, schedule, grid, i, &z_hat, builder.latent(i - 1))?;
        builder.push(i, z, eps, 1)?;
    }
    builder.finish()
}

/// Runs the selected strategy from `z0` and returns the inversion
/// trajectory with per-step diagnostics.
pub fn invert(
    method: InversionMethod,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    z0: &Latent,
) -> Result<Trajectory> {
    grid.check_schedule(schedule)?;
    match method {
        InversionMethod::Ife => ife_invert(predictor, schedule, grid, z0),
        InversionMethod::IfeNoErrorApprox => {
            ife_invert_with_options(predictor, schedule, grid, z0, true, false)
        }
        InversionMethod::IfeNoInitialEstimate => {
            ife_invert_with_options(predictor, schedule, grid, z0, false, true)
        }
        InversionMethod::DdimNaive { eps_time } => {
            let mut builder = InversionBuilder::new(schedule, grid, z0);
            for i in 1..=grid.n_steps() {
                let (z, eps) =
                    naive_step_inner(predictor, schedule, grid, i, builder.latent(i - 1), eps_time)?;
                builder.push(i, z, eps, 1)?;
            }
            builder.finish()
        }
        InversionMethod::FixedPoint { extra_iters, tol } => {
            let mut builder = InversionBuilder::new(schedule, grid, z0);
            for i in 1..=grid.n_steps() {
                let out = iterate_step(
                    predictor,
                    schedule,
                    grid,
                    i,
                    builder.latent(i - 1),
                    1 + extra_iters,
                    tol,
                )?;
                builder.push(i, out.z, out.eps, out.calls)?;
            }
            builder.finish()
        }
        InversionMethod::Oracle { tol, max_iters } => {
            let mut builder = InversionBuilder::new(schedule, grid, z0);
            for i in 1..=grid.n_steps() {
                let out = iterate_step(
                    predictor,
                    schedule,
                    grid,
                    i,
                    builder.latent(i - 1),
                    max_iters,
                    tol,
                )?;
                if !out.converged {
                    return Err(Error::NoConvergence {
                        iters: out.calls as usize,
                        residual: out.residual,
                    });
                }
                builder.push(i, out.z, out.eps, out.calls)?;
            }
            builder.finish()
        }
    }
}

/// Accumulates an inversion trajectory step by step, caching the noise each
/// step used and the data prediction implied by its output latent.
struct InversionBuilder<'a> {
    schedule: &'a NoiseSchedule,
    grid: &'a TimestepGrid,
    latents: Vec<Latent>,
    eps: Vec<Latent>,
    data_pred: Vec<Latent>,
    calls: Vec<u64>,
}

impl<'a> InversionBuilder<'a> {
    fn new(schedule: &'a NoiseSchedule, grid: &'a TimestepGrid, z0: &Latent) -> Self {
        Self {
            schedule,
            grid,
            latents: vec![z0.clone().with_tag(grid.timestep(0))],
            eps: Vec::with_capacity(grid.n_steps()),
            data_pred: Vec::with_capacity(grid.n_steps()),
            calls: Vec::with_capacity(grid.n_steps()),
        }
    }

    fn latent(&self, i: usize) -> &Latent {
        &self.latents[i]
    }

    fn push(&mut self, i: usize, z: Latent, eps: Latent, calls: u64) -> Result<()> {
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("inversion step {i}")));
        }
        let t = self.grid.timestep(i);
        let dp = data_prediction(self.schedule, &z, t, &eps)?;
        self.latents.push(z.with_tag(t));
        self.eps.push(eps);
        self.data_pred.push(dp);
        self.calls.push(calls);
        Ok(())
    }

    fn finish(self) -> Result<Trajectory> {
        Trajectory::from_parts(
            self.grid.clone(),
            self.latents,
            self.eps,
            self.data_pred,
            Direction::Inversion,
            self.calls,
        )
    }
}
