//! Scalar reconstruction metrics and report emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::latent::Latent;

/// PSNR reported for an exact match, where the ratio is infinite.
pub const PSNR_EXACT_SENTINEL: f64 = 300.0;

/// Mean squared difference over all elements.
pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    let diff = a.sub(b)?;
    let n = diff.dim() as f64;
    Ok(diff.values().iter().map(|v| v * v).sum::<f64>() / n)
}

/// `10 * log10(peak^2 / mse)`, with the exact-match sentinel on zero MSE.
pub fn psnr(a: &Latent, b: &Latent, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_EXACT_SENTINEL);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// One (method, trial) reconstruction result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub method: String,
    pub trial: usize,
    /// Stream id of the trial instance; shared by every method so rows pair up.
    pub seed: u64,
    pub nfe: u64,
    pub mse: f64,
    pub psnr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialFailure {
    pub method: String,
    pub trial: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub trials_ok: usize,
    pub failures: usize,
    pub nfe_mean: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub wall_ms_mean: f64,
    /// Mean L2 gap between the inversion and denoising latents at each grid
    /// position.
    pub per_step_deviation: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dim: usize,
    pub steps: usize,
    pub seed: u64,
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<MethodAggregate>,
    pub failures: Vec<TrialFailure>,
}

impl MetricsReport {
    pub fn aggregate(&self, method: &str) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const CSV_HEADER: [&str; 8] = [
    "method", "seed", "dim", "steps", "nfe", "mse", "psnr", "wall_ms",
];

/// Writes one CSV row per (method, trial).
pub fn emit_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(CSV_HEADER)?;
    for row in &report.rows {
        wtr.write_record([
            row.method.clone(),
            row.seed.to_string(),
            report.dim.to_string(),
            report.steps.to_string(),
            row.nfe.to_string(),
            row.mse.to_string(),
            row.psnr.to_string(),
            format!("{:.3}", row.wall_ms),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes one CSV row per method with trial-aggregate values.
pub fn emit_aggregate_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(CSV_HEADER)?;
    for agg in &report.aggregates {
        wtr.write_record([
            agg.method.clone(),
            report.seed.to_string(),
            report.dim.to_string(),
            report.steps.to_string(),
            agg.nfe_mean.to_string(),
            agg.mse_mean.to_string(),
            agg.psnr_mean.to_string(),
            format!("{:.3}", agg.wall_ms_mean),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn mse_examples() {
        let a = Latent::from_vec(vec![0.0, 0.0]).unwrap();
        let b = Latent::from_vec(vec![3.0, 4.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(mse(&a, &b).unwrap(), 12.5, max_relative = 1e-15);
        let c = Latent::from_vec(vec![1.0]).unwrap();
        assert!(mse(&a, &c).is_err());
    }

    #[test]
    fn mse_matches_naive_loop() {
        let mut rng = crate::seeding::rng_from(4, &[]);
        let a: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mut acc = 0.0;
        for k in 0..16 {
            let d = a[k] - b[k];
            acc += d * d;
        }
        acc /= 16.0;
        let la = Latent::from_vec(a).unwrap();
        let lb = Latent::from_vec(b).unwrap();
        assert_relative_eq!(mse(&la, &lb).unwrap(), acc, epsilon = 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = Latent::from_vec(vec![0.0, 0.0]).unwrap();
        let b = Latent::from_vec(vec![3.0, 4.0]).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_EXACT_SENTINEL);
        // peak 5, mse 12.5 -> 10 log10(2)
        assert_relative_eq!(
            psnr(&a, &b, 5.0).unwrap(),
            10.0 * 2.0f64.log10(),
            max_relative = 1e-12
        );
        // peak 1, mse 0.01 -> 20 dB
        let c = Latent::from_vec(vec![0.1, -0.1]).unwrap();
        assert_relative_eq!(psnr(&a, &c, 1.0).unwrap(), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_relative_eq!(m, 2.0);
        assert_relative_eq!(s, 1.0);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!((m, s), (5.0, 0.0));
    }
}
