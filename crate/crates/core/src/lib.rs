//! Simulator calibration by per-cell Gaussian-process emulation, maximum
//! likelihood discrepancy estimation and inversion of a chi-square
//! plausibility test into a confidence set over simulator parameters.

pub mod brent;
pub mod confset;
pub mod data;
pub mod discrepancy;
pub mod error;
pub mod filter;
pub mod fleet;
pub mod gp;
pub mod grid;
pub mod history;
pub mod parallel;
pub mod pipeline;
pub mod plausibility;
pub mod residuals;
pub mod synthetic;

pub use error::{Error, Result};
