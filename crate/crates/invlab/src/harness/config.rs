//! Experiment configuration: JSON schema, validation, and instance building.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::InversionMethod;
use crate::latent::Latent;
use crate::models::{
    GammaSchedule, GaussianMixture, GaussianPredictor, GmmPredictor, NoisePredictor,
};
use crate::schedule::{BetaParams, NoiseSchedule, ScheduleKind, TimestepGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_kind")]
    pub kind: ScheduleKind,
    #[serde(rename = "T", default = "default_model_steps")]
    pub model_steps: usize,
    #[serde(default)]
    pub beta_start: Option<f64>,
    #[serde(default)]
    pub beta_end: Option<f64>,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::ScaledLinearBeta
}

fn default_model_steps() -> usize {
    1000
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            model_steps: default_model_steps(),
            beta_start: None,
            beta_end: None,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let params = match (self.beta_start, self.beta_end) {
            (None, None) => None,
            (bs, be) => {
                let defaults = BetaParams::default();
                Some(BetaParams {
                    beta_start: bs.unwrap_or(defaults.beta_start),
                    beta_end: be.unwrap_or(defaults.beta_end),
                })
            }
        };
        NoiseSchedule::build(self.kind, self.model_steps, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Number of inversion steps `N`.
    #[serde(default = "default_grid_steps")]
    pub steps: usize,
    #[serde(default = "default_grid_offset")]
    pub offset: usize,
}

fn default_grid_steps() -> usize {
    50
}

fn default_grid_offset() -> usize {
    1
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            steps: default_grid_steps(),
            offset: default_grid_offset(),
        }
    }
}

impl GridSpec {
    pub fn build(&self, schedule: &NoiseSchedule) -> Result<TimestepGrid> {
        TimestepGrid::uniform(schedule, self.steps, self.offset)
    }
}

/// Data model the experiments sample from and score against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Zero-mean isotropic Gaussian.
    Gaussian { variance: f64 },
    /// Fixed mixture loaded from a spec file.
    Gmm { path: PathBuf },
    /// A fresh seeded random mixture per trial.
    GmmRandom { components: usize },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Gaussian { variance: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModelSpec {
    pub gamma: GammaSchedule,
    #[serde(default)]
    pub rho: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub trajectories: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub error_model: Option<ErrorModelSpec>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    pub trials: usize,
    pub seed: u64,
    pub dim: usize,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_methods() -> Vec<String> {
    vec!["ife".into(), "ddim".into()]
}

impl ExperimentConfig {
    /// Baseline configuration used by the CLI when no file is given.
    pub fn default_with(trials: usize, seed: u64, dim: usize) -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            grid: GridSpec::default(),
            model: ModelSpec::default(),
            error_model: None,
            methods: default_methods(),
            trials,
            seed,
            dim,
        output: OutputSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list must not be empty".into()));
        }
        for m in &self.methods {
            InversionMethod::parse(m)?;
        }
        let schedule = self.schedule.build()?;
        self.grid.build(&schedule)?;
        match &self.model {
            ModelSpec::Gaussian { variance } => {
                if !(variance.is_finite() && *variance > 0.0) {
                    return Err(Error::Config(format!(
                        "gaussian model variance must be positive, got {variance}"
                    )));
                }
            }
            ModelSpec::Gmm { path } => {
                GaussianMixture::from_json_file(path).map_err(|e| {
                    Error::Config(format!("gmm spec {}: {e}", path.display()))
                })?;
            }
            ModelSpec::GmmRandom { components } => {
                if *components == 0 {
                    return Err(Error::Config("gmm-random needs components >= 1".into()));
                }
            }
        }
        if let Some(em) = &self.error_model {
            crate::models::ErrorModel::new(em.gamma.clone(), em.rho, 0)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parsed_methods(&self) -> Result<Vec<InversionMethod>> {
        self.methods.iter().map(|m| InversionMethod::parse(m)).collect()
    }
}

/// Reads and validates a JSON experiment configuration. Schema violations
/// carry serde's field and line/column diagnostics.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// A concrete data model for one trial.
#[derive(Debug, Clone)]
pub enum ModelInstance {
    Gaussian { variance: f64 },
    Gmm(GaussianMixture),
}

impl ModelInstance {
    /// Builds the per-trial instance. File-backed mixtures should be loaded
    /// once and passed through `shared_gmm`.
    pub fn for_trial(
        spec: &ModelSpec,
        shared_gmm: Option<&GaussianMixture>,
        dim: usize,
        instance_seed: u64,
    ) -> Result<Self> {
        match spec {
            ModelSpec::Gaussian { variance } => Ok(Self::Gaussian {
                variance: *variance,
            }),
            ModelSpec::Gmm { path } => match shared_gmm {
                Some(m) => Ok(Self::Gmm(m.clone())),
                None => Ok(Self::Gmm(GaussianMixture::from_json_file(path)?)),
            },
            ModelSpec::GmmRandom { components } => Ok(Self::Gmm(GaussianMixture::random(
                *components,
                dim,
                instance_seed,
            )?)),
        }
    }

    pub fn sample_z0<R: Rng>(&self, dim: usize, rng: &mut R) -> Result<Latent> {
        match self {
            Self::Gaussian { variance } => {
                let sd = variance.sqrt();
                Latent::from_vec(
                    (0..dim)
                        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
            Self::Gmm(m) => {
                if m.dim() != dim {
                    return Err(Error::Config(format!(
                        "gmm dimension {} does not match configured dim {dim}",
                        m.dim()
                    )));
                }
                Ok(m.sample(rng))
            }
        }
    }

    pub fn coordinate_std(&self) -> f64 {
        match self {
            Self::Gaussian { variance } => variance.sqrt(),
            Self::Gmm(m) => m.coordinate_std(),
        }
    }

    pub fn predictor(&self, schedule: Arc<NoiseSchedule>) -> Result<Box<dyn NoisePredictor>> {
        match self {
            Self::Gaussian { variance } => {
                Ok(Box::new(GaussianPredictor::new(*variance, schedule)?))
            }
            Self::Gmm(m) => Ok(Box::new(GmmPredictor::new(m.clone(), schedule))),
        }
    }
}
