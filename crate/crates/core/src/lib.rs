//! Bayesian validation of computer models whose output is a function of time.
//!
//! Field and model curves are registered to common event times, decomposed in
//! an orthonormal wavelet basis, emulated coefficient by coefficient with
//! Gaussian processes, and calibrated jointly with a bias term by MCMC. The
//! posterior draws give tolerance bands for bias, reality and new field runs.

pub mod calibration;
pub mod curve;
pub mod design;
pub mod emulator;
pub mod error;
pub mod iumap;
pub mod optimize;
pub mod pipeline;
pub mod prediction;
pub mod registration;
pub mod rng;
pub mod synth;
pub mod wavelet;

pub use error::{Error, Result};
