//! Noise schedules, inversion timestep grids, and per-step coefficients.
//!
//! A schedule is a discrete table of cumulative signal coefficients
//! `alpha_bar` over model timesteps, strictly decreasing. A grid selects the
//! strictly increasing timesteps `t_0 < t_1 < ... < t_N` an inversion walks
//! through; all per-step coefficients derive from the `alpha_bar` pair at the
//! two ends of a step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this magnitude the eta coefficient is treated as singular, since
/// both the error extraction and the fixed-point estimate divide by it.
pub const ETA_SINGULAR_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    ScaledLinearBeta,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScheduleKind::LinearBeta => "linear-beta",
            ScheduleKind::ScaledLinearBeta => "scaled-linear-beta",
            ScheduleKind::Cosine => "cosine",
        };
        f.write_str(s)
    }
}

/// Endpoints of the per-timestep beta ramp for the beta-based kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for BetaParams {
    /// Common latent-diffusion ramp.
    fn default() -> Self {
        Self {
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
        }
    }
}

impl BetaParams {
    fn validate(&self) -> Result<()> {
        if !(self.beta_start.is_finite() && self.beta_end.is_finite()) {
            return Err(Error::InvalidParams("beta endpoints must be finite".into()));
        }
        if self.beta_start <= 0.0 || self.beta_end >= 1.0 || self.beta_start > self.beta_end {
            return Err(Error::InvalidParams(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{}, {}]",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Discrete table of cumulative signal coefficients over model timesteps.
///
/// Invariants: strictly decreasing, every entry in (0, 1]. Entry 0 may equal
/// 1 only on tables supplied from raw parts; grids refuse to start there.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    params: Option<BetaParams>,
    alpha_bar: Vec<f64>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

fn cosine_alpha_bar(model_steps: usize) -> Vec<f64> {
    const OFFSET: f64 = 0.008;
    const MAX_BETA: f64 = 0.999;
    let f = |x: f64| {
        let arg = (x + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let steps = model_steps as f64;
    let mut acc = 1.0;
    let mut out = Vec::with_capacity(model_steps);
    for t in 0..model_steps {
        let beta = (1.0 - f((t as f64 + 1.0) / steps) / f(t as f64 / steps)).min(MAX_BETA);
        acc *= 1.0 - beta;
        out.push(acc);
    }
    out
}

impl NoiseSchedule {
    /// Builds a schedule of `model_steps` cumulative coefficients.
    ///
    /// Beta-based kinds take `alpha_bar[t]` as the running product of
    /// `1 - beta_s` over `s <= t`; the cosine kind uses the squared-cosine
    /// ramp with its usual small offset. `params` is ignored for cosine.
    pub fn build(
        kind: ScheduleKind,
        model_steps: usize,
        params: Option<BetaParams>,
    ) -> Result<Self> {
        if model_steps == 0 {
            return Err(Error::InvalidParams("model_steps must be >= 1".into()));
        }
        let (alpha_bar, params) = match kind {
            ScheduleKind::LinearBeta | ScheduleKind::ScaledLinearBeta => {
                let p = params.unwrap_or_default();
                p.validate()?;
                let betas: Vec<f64> = match kind {
                    ScheduleKind::LinearBeta => linspace(p.beta_start, p.beta_end, model_steps),
                    _ => linspace(p.beta_start.sqrt(), p.beta_end.sqrt(), model_steps)
                        .into_iter()
                        .map(|b| b * b)
                        .collect(),
                };
                let mut acc = 1.0;
                let table = betas
                    .iter()
                    .map(|beta| {
                        acc *= 1.0 - beta;
                        acc
                    })
                    .collect();
                (table, Some(p))
            }
            ScheduleKind::Cosine => (cosine_alpha_bar(model_steps), None),
        };
        Self::from_parts(kind, params, alpha_bar)
    }

    /// Default laboratory schedule: scaled-linear betas over 1000 steps.
    pub fn default_scaled_linear() -> Self {
        Self::build(ScheduleKind::ScaledLinearBeta, 1000, None)
            .expect("default schedule parameters are valid")
    }

    /// Wraps a raw `alpha_bar` table, validating the schedule invariants.
    pub fn from_parts(
        kind: ScheduleKind,
        params: Option<BetaParams>,
        alpha_bar: Vec<f64>,
    ) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::InvalidParams("alpha_bar table is empty".into()));
        }
        for (t, &v) in alpha_bar.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(Error::InvalidParams(format!(
                    "alpha_bar[{t}] = {v} outside (0, 1]"
                )));
            }
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParams(
                "alpha_bar must be strictly decreasing".into(),
            ));
        }
        Ok(Self {
            kind,
            params,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn params(&self) -> Option<BetaParams> {
        self.params
    }

    /// Number of model timesteps `T`.
    pub fn model_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Looks up the stored cumulative coefficient at model timestep `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::OutOfRange {
                what: "model timestep",
                index: t,
                len: self.alpha_bar.len(),
            })
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// JSON form with `alpha_bar` written at 17 significant digits so the
    /// table round-trips bit-faithfully.
    pub fn to_json_string(&self) -> String {
        let params = match &self.params {
            Some(p) => format!(
                "{{\"beta_start\":{},\"beta_end\":{}}}",
                fmt17(p.beta_start),
                fmt17(p.beta_end)
            ),
            None => "null".to_string(),
        };
        let table: Vec<String> = self.alpha_bar.iter().map(|v| fmt17(*v)).collect();
        format!(
            "{{\"kind\":{},\"T\":{},\"params\":{},\"alpha_bar\":[{}]}}",
            serde_json::to_string(&self.kind).expect("kind serializes"),
            self.alpha_bar.len(),
            params,
            table.join(",")
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ScheduleJson {
            kind: ScheduleKind,
            #[serde(rename = "T")]
            model_steps: usize,
            params: Option<BetaParams>,
            alpha_bar: Vec<f64>,
        }
        let parsed: ScheduleJson = serde_json::from_str(s)?;
        if parsed.alpha_bar.len() != parsed.model_steps {
            return Err(Error::InvalidParams(format!(
                "T = {} does not match alpha_bar length {}",
                parsed.model_steps,
                parsed.alpha_bar.len()
            )));
        }
        Self::from_parts(parsed.kind, parsed.params, parsed.alpha_bar)
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Strictly increasing inversion timesteps `t_0 < t_1 < ... < t_N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    indices: Vec<usize>,
    model_steps: usize,
}

impl TimestepGrid {
    /// Uniform stride with a leading offset: `t_i = offset + i * floor((T - offset) / N)`,
    /// clipped to `T - 1`.
    ///
    /// The offset exists so `t_0` maps to `alpha_bar < 1`; the initial
    /// estimate divides by `sqrt(1 - alpha_bar(t_0))`.
    pub fn uniform(schedule: &NoiseSchedule, n_steps: usize, offset: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::InvalidParams(
                "uniform grids need at least 2 inversion steps".into(),
            ));
        }
        let t_count = schedule.model_steps();
        if offset >= t_count {
            return Err(Error::GridDegenerate(format!(
                "offset {offset} >= model steps {t_count}"
            )));
        }
        let stride = (t_count - offset) / n_steps;
        let indices: Vec<usize> = (0..=n_steps)
            .map(|i| (offset + i * stride).min(t_count - 1))
            .collect();
        Self::from_indices(schedule, indices)
    }

    /// Validates an explicit index list against the schedule.
    pub fn from_indices(schedule: &NoiseSchedule, indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::GridDegenerate(
                "grid needs at least two timesteps".into(),
            ));
        }
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::GridDegenerate(
                "timesteps must be strictly increasing (coincident indices)".into(),
            ));
        }
        let t_count = schedule.model_steps();
        let last = *indices.last().expect("non-empty");
        if last >= t_count {
            return Err(Error::OutOfRange {
                what: "grid timestep",
                index: last,
                len: t_count,
            });
        }
        if schedule.alpha_bar(indices[0])? >= 1.0 {
            return Err(Error::GridDegenerate(
                "alpha_bar at t_0 must be strictly below 1".into(),
            ));
        }
        Ok(Self {
            indices,
            model_steps: t_count,
        })
    }

    /// Number of inversion steps `N` (one less than the index count).
    pub fn n_steps(&self) -> usize {
        self.indices.len() - 1
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Model timestep `t_i`. Panics if `i > N`; step arguments are validated
    /// by [`check_step`](Self::check_step) at operation entry points.
    pub fn timestep(&self, i: usize) -> usize {
        self.indices[i]
    }

    /// Grid position of a model timestep, if it lies on the grid.
    pub fn step_of_timestep(&self, t: usize) -> Option<usize> {
        self.indices.binary_search(&t).ok()
    }

    /// Validates a step index against `1 <= i <= N`.
    pub fn check_step(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n_steps() {
            return Err(Error::OutOfRange {
                what: "inversion step",
                index: i,
                len: self.n_steps() + 1,
            });
        }
        Ok(())
    }

    pub(crate) fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.model_steps() != self.model_steps {
            return Err(Error::InvalidParams(format!(
                "grid was built for a schedule with {} steps, got {}",
                self.model_steps,
                schedule.model_steps()
            )));
        }
        Ok(())
    }
}

/// Coefficients of one inversion step, all derived from the `alpha_bar`
/// pair at the step ends.
///
/// With `s_prev = sqrt(abar_prev)`, `s = sqrt(abar_cur)`, `u_prev =
/// sqrt(1 - abar_prev)`, `u = sqrt(1 - abar_cur)`:
/// `a = s / s_prev`, `b = u - a * u_prev`, `r = u / u_prev`,
/// `eta = 1 - (s_prev / s) * r`. `eta` is strictly negative whenever the
/// schedule is strictly decreasing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub a: f64,
    pub b: f64,
    pub r: f64,
    pub eta: f64,
    pub s: f64,
}

impl StepCoefficients {
    /// Computes the coefficients from a raw `alpha_bar` pair.
    ///
    /// Domain: both values in (0, 1], previous strictly below 1. Degenerate
    /// equal pairs are allowed here (`a = 1`, `b = 0`, `eta = 0`); operations
    /// that divide by `eta` perform their own singularity check.
    pub fn from_alpha_bars(abar_prev: f64, abar_cur: f64) -> Result<Self> {
        for (name, v) in [("abar_prev", abar_prev), ("abar_cur", abar_cur)] {
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(Error::InvalidParams(format!("{name} = {v} outside (0, 1]")));
            }
        }
        if abar_prev >= 1.0 {
            return Err(Error::AlphaOne { t: 0 });
        }
        let s_prev = abar_prev.sqrt();
        let s = abar_cur.sqrt();
        let u_prev = (1.0 - abar_prev).sqrt();
        let u = (1.0 - abar_cur).sqrt();
        let a = s / s_prev;
        let b = u - a * u_prev;
        let r = u / u_prev;
        let eta = 1.0 - (s_prev / s) * r;
        Ok(Self { a, b, r, eta, s })
    }

    /// Errors if `|eta|` falls below the singularity threshold.
    pub fn check_eta(&self) -> Result<()> {
        if self.eta.abs() < ETA_SINGULAR_THRESHOLD {
            return Err(Error::EtaSingular { eta: self.eta });
        }
        Ok(())
    }
}

/// Coefficients for step `i` of a grid, `1 <= i <= N`.
///
/// Errors with `EtaSingular` on a flat-schedule degenerate pair.
pub fn step_coefficients(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    i: usize,
) -> Result<StepCoefficients> {
    grid.check_schedule(schedule)?;
    grid.check_step(i)?;
    let abar_prev = schedule.alpha_bar(grid.timestep(i - 1))?;
    let abar_cur = schedule.alpha_bar(grid.timestep(i))?;
    let coeffs = StepCoefficients::from_alpha_bars(abar_prev, abar_cur)?;
    coeffs.check_eta()?;
    Ok(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_beta_single_step() {
        let s = NoiseSchedule::build(
            ScheduleKind::LinearBeta,
            1,
            Some(BetaParams {
                beta_start: 1e-4,
                beta_end: 1e-4,
            }),
        )
        .unwrap();
        assert_eq!(s.model_steps(), 1);
        assert_relative_eq!(s.alpha_bar(0).unwrap(), 0.9999, max_relative = 1e-12);
    }

    #[test]
    fn linear_beta_two_steps() {
        let s = NoiseSchedule::build(
            ScheduleKind::LinearBeta,
            2,
            Some(BetaParams {
                beta_start: 0.1,
                beta_end: 0.2,
            }),
        )
        .unwrap();
        assert_relative_eq!(s.alpha_bar(0).unwrap(), 0.9, max_relative = 1e-12);
        assert_relative_eq!(s.alpha_bar(1).unwrap(), 0.72, max_relative = 1e-12);
        assert!(matches!(
            s.alpha_bar(2),
            Err(Error::OutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn cosine_schedule_decreasing_and_high_start() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 1000, None).unwrap();
        let table = s.alpha_bar_table();
        assert!(table[0] > 0.99);
        assert!(table.windows(2).all(|w| w[1] < w[0]));
        assert!(table.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn invalid_beta_params_rejected() {
        for (bs, be) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0), (-0.1, 0.2)] {
            let r = NoiseSchedule::build(
                ScheduleKind::LinearBeta,
                10,
                Some(BetaParams {
                    beta_start: bs,
                    beta_end: be,
                }),
            );
            assert!(r.is_err(), "betas ({bs}, {be}) should be rejected");
        }
    }

    #[test]
    fn from_parts_validates_monotonicity_and_range() {
        assert!(NoiseSchedule::from_parts(ScheduleKind::LinearBeta, None, vec![0.9, 0.9]).is_err());
        assert!(NoiseSchedule::from_parts(ScheduleKind::LinearBeta, None, vec![0.5, 0.9]).is_err());
        assert!(NoiseSchedule::from_parts(ScheduleKind::LinearBeta, None, vec![0.9, 1.1]).is_err());
        assert!(NoiseSchedule::from_parts(ScheduleKind::LinearBeta, None, vec![0.9, 0.0]).is_err());
        // entry 0 may equal 1 on raw tables
        assert!(NoiseSchedule::from_parts(ScheduleKind::LinearBeta, None, vec![1.0, 0.5]).is_ok());
    }

    #[test]
    fn uniform_grid_shape() {
        let s = NoiseSchedule::default_scaled_linear();
        let g = TimestepGrid::uniform(&s, 50, 1).unwrap();
        assert_eq!(g.indices().len(), 51);
        assert_eq!(g.n_steps(), 50);
        assert_eq!(g.timestep(0), 1);
        assert_eq!(g.timestep(1), 20);
        assert!(g.indices().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn uniform_grid_pigeonhole_degenerate() {
        let s = NoiseSchedule::build(ScheduleKind::LinearBeta, 10, None).unwrap();
        assert!(matches!(
            TimestepGrid::uniform(&s, 20, 1),
            Err(Error::GridDegenerate(_))
        ));
    }

    #[test]
    fn grid_rejects_alpha_bar_one_at_origin() {
        let mut table: Vec<f64> = (0..1000).map(|t| 1.0 - t as f64 / 1000.0).collect();
        table[0] = 1.0;
        let s = NoiseSchedule::from_parts(ScheduleKind::LinearBeta, None, table).unwrap();
        assert!(matches!(
            TimestepGrid::uniform(&s, 50, 0),
            Err(Error::GridDegenerate(_))
        ));
        // offset 1 avoids the singular origin
        assert!(TimestepGrid::uniform(&s, 50, 1).is_ok());
    }

    #[test]
    fn step_coefficients_exact_pair() {
        // abar 0.8 -> 0.5: eta = 1 - sqrt(0.8/0.5) * sqrt(0.5/0.2) = 1 - sqrt(4) = -1
        let c = StepCoefficients::from_alpha_bars(0.8, 0.5).unwrap();
        assert_relative_eq!(c.eta, -1.0, max_relative = 1e-15);
        assert_relative_eq!(c.r, (0.5f64 / 0.2).sqrt(), max_relative = 1e-15);
        assert_relative_eq!(c.s, 0.5f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn step_coefficients_flat_pair_is_eta_singular() {
        let c = StepCoefficients::from_alpha_bars(0.5, 0.5).unwrap();
        assert_eq!(c.eta, 0.0);
        assert_eq!(c.a, 1.0);
        assert!(c.b.abs() < 1e-15);
        assert!(matches!(c.check_eta(), Err(Error::EtaSingular { .. })));
    }

    #[test]
    fn step_coefficients_derived_value() {
        // abar 0.9 -> 0.72: eta = 1 - sqrt(0.9 * 0.28 / (0.72 * 0.1)) = 1 - sqrt(3.5)
        let c = StepCoefficients::from_alpha_bars(0.9, 0.72).unwrap();
        assert_relative_eq!(c.eta, -0.8708286933869707, max_relative = 1e-14);
        // cross-check against the single-sqrt rearrangement
        let alt = 1.0 - (0.9f64 * 0.28 / (0.72 * 0.1)).sqrt();
        assert_relative_eq!(c.eta, alt, max_relative = 1e-14);
    }

    #[test]
    fn step_coefficients_op_checks_bounds() {
        let s = NoiseSchedule::default_scaled_linear();
        let g = TimestepGrid::uniform(&s, 10, 1).unwrap();
        assert!(step_coefficients(&s, &g, 0).is_err());
        assert!(step_coefficients(&s, &g, 11).is_err());
        assert!(step_coefficients(&s, &g, 10).is_ok());
    }

    #[test]
    fn eta_negative_and_identities_hold_on_default_grid() {
        let s = NoiseSchedule::default_scaled_linear();
        let g = TimestepGrid::uniform(&s, 50, 1).unwrap();
        for i in 1..=g.n_steps() {
            let c = step_coefficients(&s, &g, i).unwrap();
            assert!(c.eta < 0.0, "eta must be negative at step {i}");
            let abar_prev = s.alpha_bar(g.timestep(i - 1)).unwrap();
            let abar_cur = s.alpha_bar(g.timestep(i)).unwrap();
            // r * sqrt(1 - abar_prev) = sqrt(1 - abar_cur)
            assert_relative_eq!(
                c.r * (1.0 - abar_prev).sqrt(),
                (1.0 - abar_cur).sqrt(),
                max_relative = 1e-14
            );
            // eta = 1 - (sqrt(abar_prev) / sqrt(abar_cur)) * r
            assert_relative_eq!(
                c.eta,
                1.0 - (abar_prev.sqrt() / abar_cur.sqrt()) * c.r,
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn json_round_trip_is_bit_faithful() {
        let s = NoiseSchedule::default_scaled_linear();
        let json = s.to_json_string();
        let back = NoiseSchedule::from_json_str(&json).unwrap();
        assert_eq!(s, back);
        // and once more through the serializer
        assert_eq!(json, back.to_json_string());
    }

    #[test]
    fn json_rejects_inconsistent_length() {
        let bad = r#"{"kind":"linear-beta","T":3,"params":null,"alpha_bar":[0.9,0.8]}"#;
        assert!(NoiseSchedule::from_json_str(bad).is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn coefficients_well_formed_for_decreasing_pairs(
            abar_prev in 0.05f64..0.999,
            gap in 0.02f64..0.9,
        ) {
            let abar_cur = (abar_prev * (1.0 - gap)).max(1e-4);
            prop_assume!(abar_cur < abar_prev);
            let c = StepCoefficients::from_alpha_bars(abar_prev, abar_cur).unwrap();
            prop_assert!(c.eta < 0.0);
            prop_assert!(c.a > 0.0 && c.a < 1.0);
            prop_assert!(c.r > 1.0);
            prop_assert!(c.b > 0.0);
            let u = (1.0 - abar_cur).sqrt();
            let u_prev = (1.0 - abar_prev).sqrt();
            prop_assert!((c.b - (u - c.a * u_prev)).abs() < 1e-14);
        }

        #[test]
        fn built_schedules_strictly_decreasing(
            steps in 2usize..200,
            bs in 1e-5f64..5e-3,
            mult in 1.5f64..30.0,
        ) {
            let be = (bs * mult).min(0.5);
            let s = NoiseSchedule::build(
                ScheduleKind::ScaledLinearBeta,
                steps,
                Some(BetaParams { beta_start: bs, beta_end: be }),
            ).unwrap();
            let t = s.alpha_bar_table();
            prop_assert!(t.windows(2).all(|w| w[1] < w[0]));
            prop_assert!(t.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
