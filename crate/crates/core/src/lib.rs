//! Desk-scale laboratory for studying exposure bias in diffusion sampling.
//!
//! The crate provides discrete noise schedules with respacing, a family of
//! epsilon predictors over toy data distributions (exact analytic, noisy
//! oracle with controllable error scale, small trainable MLP), the reverse
//! samplers (DDPM ancestral, DDIM eta-family, Euler/Heun probability-flow
//! steps) with an epsilon-scaling hook, closed-form variance oracles, and
//! Monte Carlo diagnostics for the per-timestep variance gap between
//! training and sampling distributions.

pub mod data;
pub mod denoiser;
pub mod diagnostics;
pub mod mlp;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod scaling;
pub mod schedule;
pub mod stats;
pub mod theory;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
