//! Noise predictors: exact closed-form scores for tractable data
//! distributions, a ground-truth predictor for a known sample, and an
//! error-injecting wrapper with an AR(1) cross-step dependence.
//!
//! Every predictor keeps an NFE ledger that increments by exactly one per
//! evaluation; counters are atomic so predictor instances can be shared
//! across threads.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::seeding;

/// Opaque conditioning token. The analytic predictors ignore it; it exists
/// so the predictor interface lines up with conditional samplers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conditioning(pub Option<String>);

impl Conditioning {
    pub fn none() -> Self {
        Self(None)
    }
}

/// Produces a noise prediction of the same shape as its input and counts
/// evaluations.
pub trait NoisePredictor: Send + Sync {
    /// Predicts the noise component of `z` at model timestep `t`.
    /// Increments the NFE ledger by exactly one.
    fn predict(&self, z: &Latent, t: usize, cond: &Conditioning) -> Result<Latent>;

    /// Evaluations performed so far.
    fn nfe(&self) -> u64;
}

/// Exact noise prediction for data distributed as a zero-mean isotropic
/// Gaussian with variance `data_variance`.
///
/// The diffused marginal at `t` is Gaussian with per-coordinate variance
/// `abar * data_variance + 1 - abar`, so the ideal prediction is
/// `sqrt(1 - abar) * z / (abar * data_variance + 1 - abar)`.
pub fn exact_eps_gaussian(
    data_variance: f64,
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if !(data_variance.is_finite() && data_variance > 0.0) {
        return Err(Error::InvalidParams(format!(
            "data variance must be positive, got {data_variance}"
        )));
    }
    let abar = schedule.alpha_bar(t)?;
    let marginal_var = abar * data_variance + (1.0 - abar);
    Ok(z.scale((1.0 - abar).sqrt() / marginal_var))
}

/// Isotropic Gaussian mixture used as an exact-score stand-in for a trained
/// network.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Latent>,
    variances: Vec<f64>,
    dim: usize,
}

/// On-disk form of a mixture spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Latent>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::InvalidParams(
                "mixture needs matching, non-empty weights/means/variances".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "weights must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidParams(
                "component variances must be positive".into(),
            ));
        }
        let dim = means[0].dim();
        if means.iter().any(|m| m.dim() != dim) {
            return Err(Error::InvalidParams(
                "all component means must share one dimension".into(),
            ));
        }
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    pub fn from_spec(spec: &GmmSpec) -> Result<Self> {
        let means = spec
            .means
            .iter()
            .map(|m| Latent::from_vec(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(spec.weights.clone(), means, spec.variances.clone())
    }

    pub fn to_spec(&self) -> GmmSpec {
        GmmSpec {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.values().to_vec()).collect(),
            variances: self.variances.clone(),
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: GmmSpec = serde_json::from_str(&text)?;
        Self::from_spec(&spec)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Latent] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Draws a sample from the mixture.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Latent {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                pick = k;
                break;
            }
        }
        let sd = self.variances[pick].sqrt();
        let values = self.means[pick]
            .values()
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Latent::from_raw(values, vec![self.dim])
    }

    /// Per-coordinate marginal standard deviation of the mixture, averaged
    /// over coordinates. Used to pick a PSNR peak for reconstruction metrics.
    pub fn coordinate_std(&self) -> f64 {
        let dim = self.dim as f64;
        let mut mean = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (acc, v) in mean.iter_mut().zip(m.values()) {
                *acc += w * v;
            }
        }
        let mut second = 0.0;
        for ((w, m), var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let m2: f64 = m.values().iter().map(|v| v * v).sum();
            second += w * (dim * var + m2);
        }
        let mean2: f64 = mean.iter().map(|v| v * v).sum();
        ((second - mean2) / dim).max(0.0).sqrt()
    }

    /// A seeded random mixture: near-uniform weights, standard-normal means,
    /// moderate component variances.
    pub fn random(components: usize, dim: usize, seed: u64) -> Result<Self> {
        if components == 0 || dim == 0 {
            return Err(Error::InvalidParams(
                "random mixture needs components >= 1 and dim >= 1".into(),
            ));
        }
        let mut rng = seeding::rng_from(seed, &[seeding::fnv1a64("gmm-random")]);
        let mut weights: Vec<f64> = (0..components).map(|_| 0.5 + rng.random::<f64>()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        // renormalize exactly so the simplex check holds
        let drift: f64 = weights.iter().sum::<f64>() - 1.0;
        weights[0] -= drift;
        let means = (0..components)
            .map(|_| {
                let v: Vec<f64> = (0..dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Latent::from_vec(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let variances = (0..components)
            .map(|_| 0.2 + 0.3 * rng.random::<f64>())
            .collect();
        Self::new(weights, means, variances)
    }
}

/// Exact noise prediction under a Gaussian-mixture data distribution.
///
/// The diffused density at `t` is a mixture of Gaussians with means
/// `sqrt(abar) * mu_k` and per-coordinate variances `abar * var_k + 1 - abar`;
/// the prediction is `-sqrt(1 - abar)` times its log-density gradient, with
/// component responsibilities computed through log-sum-exp.
pub fn exact_eps_gmm(
    model: &GaussianMixture,
    z: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    if z.dim() != model.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![model.dim()],
            got: z.shape().to_vec(),
        });
    }
    let abar = schedule.alpha_bar(t)?;
    let s = abar.sqrt();
    let u = (1.0 - abar).sqrt();
    let dim = model.dim() as f64;

    let k = model.components();
    let mut log_terms = Vec::with_capacity(k);
    let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut vars = Vec::with_capacity(k);
    for ((w, mu), var) in model
        .weights()
        .iter()
        .zip(model.means())
        .zip(model.variances())
    {
        let v = abar * var + (1.0 - abar);
        let diff: Vec<f64> = z
            .values()
            .iter()
            .zip(mu.values())
            .map(|(zi, mi)| zi - s * mi)
            .collect();
        let d2: f64 = diff.iter().map(|d| d * d).sum();
        let log_n = -0.5 * (dim * (2.0 * std::f64::consts::PI * v).ln() + d2 / v);
        log_terms.push(w.max(f64::MIN_POSITIVE).ln() + log_n);
        diffs.push(diff);
        vars.push(v);
    }
    let max_log = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = log_terms.iter().map(|l| (l - max_log).exp()).collect();
    let total: f64 = resp.iter().sum();
    // with log-sum-exp the leading term is exp(0) = 1, so the sum cannot vanish
    assert!(total.is_finite() && total > 0.0, "responsibility underflow");
    for r in &mut resp {
        *r /= total;
    }

    let mut pull = vec![0.0; model.dim()];
    for ((r, diff), v) in resp.iter().zip(&diffs).zip(&vars) {
        for (acc, d) in pull.iter_mut().zip(diff) {
            *acc += r * d / v;
        }
    }
    for p in &mut pull {
        *p *= u;
    }
    Ok(Latent::from_raw(pull, z.shape().to_vec()))
}

macro_rules! counted_predictor {
    ($name:ident) => {
        impl $name {
            fn bump(&self) {
                self.nfe.fetch_add(1, Ordering::Relaxed);
            }
        }
    };
}

/// Predictor backed by the exact isotropic-Gaussian score.
pub struct GaussianPredictor {
    variance: f64,
    schedule: Arc<NoiseSchedule>,
    nfe: AtomicU64,
}

counted_predictor!(GaussianPredictor);

impl GaussianPredictor {
    pub fn new(variance: f64, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::InvalidParams(format!(
                "data variance must be positive, got {variance}"
            )));
        }
        Ok(Self {
            variance,
            schedule,
            nfe: AtomicU64::new(0),
        })
    }
}

impl NoisePredictor for GaussianPredictor {
    fn predict(&self, z: &Latent, t: usize, _cond: &Conditioning) -> Result<Latent> {
        self.bump();
        exact_eps_gaussian(self.variance, z, t, &self.schedule)
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }
}

/// Predictor backed by the exact Gaussian-mixture score.
pub struct GmmPredictor {
    model: GaussianMixture,
    schedule: Arc<NoiseSchedule>,
    nfe: AtomicU64,
}

counted_predictor!(GmmPredictor);

impl GmmPredictor {
    pub fn new(model: GaussianMixture, schedule: Arc<NoiseSchedule>) -> Self {
        Self {
            model,
            schedule,
            nfe: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &GaussianMixture {
        &self.model
    }
}

impl NoisePredictor for GmmPredictor {
    fn predict(&self, z: &Latent, t: usize, _cond: &Conditioning) -> Result<Latent> {
        self.bump();
        exact_eps_gmm(&self.model, z, t, &self.schedule)
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }
}

/// Predictor whose implied data prediction is exactly a known clean sample:
/// `eps(z, t) = (z - sqrt(abar) * z0) / sqrt(1 - abar)`.
///
/// This is the zero-error predictor the injection wrapper shifts in the
/// exact-identity tests.
pub struct GroundTruthPredictor {
    z0: Latent,
    schedule: Arc<NoiseSchedule>,
    nfe: AtomicU64,
}

counted_predictor!(GroundTruthPredictor);

impl GroundTruthPredictor {
    pub fn new(z0: Latent, schedule: Arc<NoiseSchedule>) -> Self {
        Self {
            z0,
            schedule,
            nfe: AtomicU64::new(0),
        }
    }
}

impl NoisePredictor for GroundTruthPredictor {
    fn predict(&self, z: &Latent, t: usize, _cond: &Conditioning) -> Result<Latent> {
        self.bump();
        z.check_same_shape(&self.z0)?;
        let abar = self.schedule.alpha_bar(t)?;
        if abar >= 1.0 {
            return Err(Error::AlphaOne { t });
        }
        let u = (1.0 - abar).sqrt();
        Ok(z.add_scaled(-abar.sqrt(), &self.z0)?.scale(1.0 / u))
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }
}

/// Predictor returning a fixed noise regardless of input; test scaffolding.
pub struct ConstantPredictor {
    eps: Latent,
    nfe: AtomicU64,
}

counted_predictor!(ConstantPredictor);

impl ConstantPredictor {
    pub fn new(eps: Latent) -> Self {
        Self {
            eps,
            nfe: AtomicU64::new(0),
        }
    }
}

impl NoisePredictor for ConstantPredictor {
    fn predict(&self, z: &Latent, _t: usize, _cond: &Conditioning) -> Result<Latent> {
        self.bump();
        z.check_same_shape(&self.eps)?;
        Ok(self.eps.clone())
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }
}

/// Per-step noise scale of the injected data-prediction error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSchedule {
    Constant(f64),
    /// One value per grid position `t_0 ... t_N`.
    PerStep(Vec<f64>),
}

/// Gaussian data-prediction error model with lag-1 correlation.
///
/// Errors form a stationary chain `x_j = rho * x_{j-1} + sqrt(1 - rho^2) * xi_j`
/// scaled to `e_j = sqrt(gamma_j) * x_j`, giving `Var[e_j] = gamma_j` and
/// `Cov[e_j, e_{j-1}] = rho * sqrt(gamma_j * gamma_{j-1})` per coordinate.
/// `rho = 1` is the constant-error limit (with equal gamma the same error
/// repeats at every step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub gamma: GammaSchedule,
    pub rho: f64,
    pub seed: u64,
}

impl ErrorModel {
    pub fn constant(gamma: f64, rho: f64, seed: u64) -> Result<Self> {
        Self::new(GammaSchedule::Constant(gamma), rho, seed)
    }

    pub fn new(gamma: GammaSchedule, rho: f64, seed: u64) -> Result<Self> {
        let model = Self { gamma, rho, seed };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) || !self.rho.is_finite() {
            return Err(Error::InvalidParams(format!(
                "rho must lie in [0, 1], got {}",
                self.rho
            )));
        }
        let ok = match &self.gamma {
            GammaSchedule::Constant(g) => g.is_finite() && *g >= 0.0,
            GammaSchedule::PerStep(gs) => {
                !gs.is_empty() && gs.iter().all(|g| g.is_finite() && *g >= 0.0)
            }
        };
        if !ok {
            return Err(Error::InvalidParams(
                "gamma values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Gamma at grid position `j` (0-based over `t_0 ... t_N`).
    pub fn gamma_at(&self, j: usize) -> Result<f64> {
        match &self.gamma {
            GammaSchedule::Constant(g) => Ok(*g),
            GammaSchedule::PerStep(gs) => gs.get(j).copied().ok_or(Error::OutOfRange {
                what: "gamma schedule entry",
                index: j,
                len: gs.len(),
            }),
        }
    }

    /// Samples the whole error chain for one trial: `n_steps + 1` latents,
    /// one per grid position. Pure function of `(seed, trial, position)`.
    pub fn sample_errors(&self, trial: u64, n_steps: usize, dim: usize) -> Result<Vec<Latent>> {
        if let GammaSchedule::PerStep(gs) = &self.gamma {
            if gs.len() < n_steps + 1 {
                return Err(Error::InvalidParams(format!(
                    "per-step gamma schedule has {} entries, grid needs {}",
                    gs.len(),
                    n_steps + 1
                )));
            }
        }
        let mut rng = seeding::rng_from(self.seed, &[seeding::fnv1a64("error-chain"), trial]);
        let fresh = (1.0 - self.rho * self.rho).sqrt();
        let mut standardized: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut out = Vec::with_capacity(n_steps + 1);
        for j in 0..=n_steps {
            if j > 0 {
                for x in &mut standardized {
                    *x = self.rho * *x + fresh * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let g = self.gamma_at(j)?.sqrt();
            let values = standardized.iter().map(|x| g * x).collect();
            out.push(Latent::from_raw(values, vec![dim]));
        }
        Ok(out)
    }
}

/// Wraps a base predictor and shifts its implied data prediction by a
/// per-step error latent.
///
/// Shifting the data prediction by `e` is equivalent to shifting the noise
/// prediction by `-sqrt(abar) / sqrt(1 - abar) * e`. The injected error
/// depends only on `(seed, trial, grid position)` — never on the evaluation
/// point — so a step's implicit inversion equation keeps `e` as a constant.
pub struct PerturbedPredictor {
    base: Box<dyn NoisePredictor>,
    schedule: Arc<NoiseSchedule>,
    grid: TimestepGrid,
    errors: Vec<Latent>,
}

impl PerturbedPredictor {
    pub fn new(
        base: Box<dyn NoisePredictor>,
        schedule: Arc<NoiseSchedule>,
        grid: &TimestepGrid,
        model: &ErrorModel,
        trial: u64,
        dim: usize,
    ) -> Result<Self> {
        grid.check_schedule(&schedule)?;
        let errors = model.sample_errors(trial, grid.n_steps(), dim)?;
        Ok(Self {
            base,
            schedule,
            grid: grid.clone(),
            errors,
        })
    }

    /// The error injected at grid position `j`.
    pub fn injected_error(&self, j: usize) -> Result<&Latent> {
        self.errors.get(j).ok_or(Error::OutOfRange {
            what: "injected error",
            index: j,
            len: self.errors.len(),
        })
    }
}

impl NoisePredictor for PerturbedPredictor {
    fn predict(&self, z: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        let j = self.grid.step_of_timestep(t).ok_or_else(|| {
            Error::InvalidParams(format!("timestep {t} is not on the injection grid"))
        })?;
        let eps = self.base.predict(z, t, cond)?;
        let abar = self.schedule.alpha_bar(t)?;
        if abar >= 1.0 {
            return Err(Error::AlphaOne { t });
        }
        let shift = -abar.sqrt() / (1.0 - abar).sqrt();
        eps.add_scaled(shift, &self.errors[j])
    }

    fn nfe(&self) -> u64 {
        self.base.nfe()
    }
}
