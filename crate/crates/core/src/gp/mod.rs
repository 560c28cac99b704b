//! Single-cell Gaussian-process emulator with a constant mean and an
//! anisotropic exponential covariance
//!
//! ```text
//! k(u, u') = amplitude2 * exp(-sqrt(sum_i (u_i - u'_i)^2 / l_i^2))
//! ```
//!
//! plus a small trainable nugget on the diagonal.

mod emulator;
mod lbfgsb;
mod likelihood;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use emulator::{fit, CellEmulator, FitConfig, EMULATOR_FORMAT_VERSION};
pub use lbfgsb::{minimize_box, BoxOptConfig, BoxOptResult};
pub use likelihood::{log_marginal_likelihood, LmlWorkspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub beta0: f64,
    pub amplitude2: f64,
    pub length_scales: Vec<f64>,
    pub nugget: f64,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude2 > 0.0 && self.amplitude2.is_finite()) {
            return Err(Error::Domain(format!(
                "amplitude2 {} must be positive",
                self.amplitude2
            )));
        }
        if let Some(l) = self.length_scales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::Domain(format!("length scale {l} must be positive")));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::Domain(format!("nugget {} must be nonnegative", self.nugget)));
        }
        if !self.beta0.is_finite() {
            return Err(Error::Domain("beta0 must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// `[beta0, ln amplitude2, ln l_1 .. ln l_p, ln nugget]`, the coordinates the
    /// likelihood gradient and the optimizer work in.
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 3);
        v.push(self.beta0);
        v.push(self.amplitude2.ln());
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.nugget.ln());
        v
    }

    pub fn from_log_params(theta: &[f64]) -> Self {
        let p = theta.len() - 3;
        Hyperparameters {
            beta0: theta[0],
            amplitude2: theta[1].exp(),
            length_scales: theta[2..2 + p].iter().map(|t| t.exp()).collect(),
            nugget: theta[2 + p].exp(),
        }
    }
}

/// Scaled distance `sqrt(sum_i (u_i - v_i)^2 / l_i^2)`.
#[inline]
pub(crate) fn scaled_distance(u: &[f64], v: &[f64], length_scales: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .zip(length_scales)
        .map(|((a, b), l)| {
            let t = (a - b) / l;
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Covariance between two parameter vectors (without the nugget).
pub fn kernel(u: &[f64], v: &[f64], hyper: &Hyperparameters) -> Result<f64> {
    if u.len() != v.len() || u.len() != hyper.dim() {
        return Err(Error::Domain(format!(
            "dimension mismatch: {} vs {} vs {} length scales",
            u.len(),
            v.len(),
            hyper.dim()
        )));
    }
    if let Some(l) = hyper.length_scales.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::Domain(format!("length scale {l} must be positive")));
    }
    Ok(hyper.amplitude2 * (-scaled_distance(u, v, &hyper.length_scales)).exp())
}
