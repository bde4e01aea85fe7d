//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate timestep grid: {0}")]
    GridDegenerate(String),

    #[error("step coefficient eta is numerically singular (|eta| = {eta:e})")]
    EtaSingular { eta: f64 },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("alpha_bar = 0 at t = {t}; data prediction undefined")]
    AlphaZero { t: usize },

    #[error("alpha_bar = 1 at t = {t}; noise extraction undefined")]
    AlphaOne { t: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("no convergence after {iters} iterations (final residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("unknown inversion method `{0}`")]
    UnknownMethod(String),

    #[error("histogram requires at least one sample")]
    EmptySamples,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for runtime divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParams(_)
            | Error::Config(_)
            | Error::UnknownMethod(_)
            | Error::Json(_)
            | Error::Io(_) => 2,
            Error::NonFinite(_) | Error::NoConvergence { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
