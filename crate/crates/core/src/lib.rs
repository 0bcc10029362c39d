//! Joint transmit-beamformer and RIS-phase design for an information-decoupled
//! symbiotic-radio broadcast link, solved by penalty-based block coordinate
//! descent.
//!
//! Module map:
//! - [`specfun`]: incomplete gamma, Gaussian tail, monotone root finding.
//! - [`detector`]: closed-form energy-detection BER, λ_s inversion, Monte Carlo check.
//! - [`model`]: configuration, channels, effective channels, constraint residuals.
//! - [`solver`]: the penalty BCD algorithm and its block updates.
//! - [`baselines`]: WORIS, WOBRx and conventional SR comparison systems.
//! - [`channelgen`]: geometry-driven Rayleigh channel sampling.
//! - [`harness`]: experiment configuration, sweeps and CSV output.

pub mod error;
pub mod specfun;
pub mod detector;
pub mod model;
pub mod solver;
pub mod baselines;
pub mod channelgen;
pub mod harness;

pub use error::{Error, Result};
