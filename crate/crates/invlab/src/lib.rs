//! invlab — a numerics laboratory for deterministic diffusion inversion.
//!
//! The crate provides discrete noise schedules, exact closed-form noise
//! predictors (Gaussian and Gaussian-mixture scores), the deterministic
//! denoising sampler, and four inversion strategies: naive reversal,
//! fixed-point iteration, an iteration-free fixed-point estimator (IFE),
//! and its no-error-approximation ablation. An error-injection wrapper and
//! a statistics module make estimator bias/variance properties measurable
//! by Monte Carlo without any pretrained network.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod latent;
pub mod models;
pub mod schedule;
pub(crate) mod seeding;

pub use error::{Error, Result};
pub use latent::Latent;
