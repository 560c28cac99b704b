//! Maximum-likelihood estimate of the homoscedastic discrepancy variance.
//!
//! For each test parameter the Gaussian log likelihood of the residuals is
//! maximised over `delta2 >= 0` with Brent's method, then the test parameter
//! with the largest maximised likelihood is selected.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brent;
use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::residuals::{compensated_sum, Alignment};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscrepancyConfig {
    /// Upper end of the search interval, as a multiple of the mean squared
    /// residual.
    pub bracket_factor: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for DiscrepancyConfig {
    fn default() -> Self {
        DiscrepancyConfig {
            bracket_factor: 10.0,
            abs_tol: 1e-10,
            rel_tol: 1e-9,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub delta2: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyEstimate {
    pub delta2: f64,
    pub best_k: usize,
    pub loglik: f64,
    /// `None` where the maximisation failed for that test parameter.
    pub per_k: Vec<Option<KEstimate>>,
}

/// Gaussian log likelihood of the residuals at test parameter `k`.
pub fn log_likelihood(align: &Alignment, k: usize, delta2: f64) -> Result<f64> {
    align.check_k(k)?;
    if !(delta2 >= 0.0) || !delta2.is_finite() {
        return Err(Error::InvalidInput(format!(
            "delta2 = {delta2} must be finite and >= 0"
        )));
    }
    let mut terms = Vec::with_capacity(align.len());
    for (r, v) in align.terms(k) {
        let s2 = v + delta2;
        if !(s2 > 0.0) {
            return Err(Error::Domain("zero total variance at a retained cell".into()));
        }
        terms.push(-HALF_LN_2PI - 0.5 * s2.ln() - 0.5 * r * r / s2);
    }
    Ok(compensated_sum(terms))
}

/// Maximises the likelihood over `delta2` for one test parameter.
pub fn maximize_delta2(align: &Alignment, k: usize, cfg: &DiscrepancyConfig) -> Result<KEstimate> {
    align.check_k(k)?;
    let m = align.len() as f64;
    let mean_r2 = compensated_sum(align.terms(k).map(|(r, _)| r * r)) / m;
    let mean_v = compensated_sum(align.terms(k).map(|(_, v)| v)) / m;
    let mut upper = cfg.bracket_factor * mean_r2;
    if !(upper > 0.0) {
        upper = cfg.bracket_factor * mean_v;
    }
    if !(upper > 0.0) {
        upper = 1.0;
    }

    let neg = |d: f64| log_likelihood(align, k, d).map(|v| -v);
    let mut best = None;
    for attempt in 0..2 {
        let r = brent::minimize(neg, 0.0, upper, cfg.rel_tol, cfg.abs_tol, cfg.max_iter)?;
        let at_upper = upper - r.x <= 1e-6 * upper;
        best = Some(r);
        if !at_upper || attempt == 1 {
            break;
        }
        debug!("k={k}: optimum at the bracket edge {upper}, expanding");
        upper *= 10.0;
    }
    let r = best.expect("at least one Brent run");
    let mut est = KEstimate {
        delta2: r.x,
        loglik: -r.value,
    };
    // the boundary at zero is admissible but never evaluated by Brent
    if let Ok(at_zero) = log_likelihood(align, k, 0.0) {
        if at_zero >= est.loglik {
            est = KEstimate {
                delta2: 0.0,
                loglik: at_zero,
            };
        }
    }
    Ok(est)
}

/// Per-k maximisation followed by the argmax over `k` (smallest `k` on ties).
pub fn estimate(align: &Alignment, cfg: &DiscrepancyConfig) -> Result<DiscrepancyEstimate> {
    if align.n_tests() == 0 {
        return Err(Error::InvalidInput("no test parameters".into()));
    }
    let per_k: Vec<Option<KEstimate>> = (0..align.n_tests())
        .into_par_iter()
        .map(|k| match maximize_delta2(align, k, cfg) {
            Ok(e) => Some(e),
            Err(e) => {
                debug!("k={k}: discrepancy maximisation failed: {e}");
                None
            }
        })
        .collect();
    let mut best: Option<(usize, KEstimate)> = None;
    for (k, e) in per_k.iter().enumerate() {
        if let Some(e) = e {
            if best.is_none_or(|(_, b)| e.loglik > b.loglik) {
                best = Some((k, *e));
            }
        }
    }
    let (best_k, b) =
        best.ok_or_else(|| Error::Estimation("likelihood maximisation failed for every test parameter".into()))?;
    Ok(DiscrepancyEstimate {
        delta2: b.delta2,
        best_k,
        loglik: b.loglik,
        per_k,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRecord {
    delta2: f64,
    best_k: usize,
    loglik: f64,
    config_hash: String,
}

/// Writes `{delta2, best_k, loglik, config_hash}`.
pub fn write_estimate(path: &Path, est: &DiscrepancyEstimate, config_hash: &str) -> Result<()> {
    let rec = EstimateRecord {
        delta2: est.delta2,
        best_k: est.best_k,
        loglik: est.loglik,
        config_hash: config_hash.into(),
    };
    let bytes = serde_json::to_vec_pretty(&rec)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads back `(delta2, best_k, loglik, config_hash)`.
pub fn read_estimate(path: &Path) -> Result<(f64, usize, f64, String)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let rec: EstimateRecord = serde_json::from_reader(std::io::BufReader::new(f))?;
    Ok((rec.delta2, rec.best_k, rec.loglik, rec.config_hash))
}

pub fn write_per_k(path: &Path, est: &DiscrepancyEstimate) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(["k", "delta2", "loglik"])?;
    for (k, e) in est.per_k.iter().enumerate() {
        match e {
            Some(e) => w.write_record([k.to_string(), fmt_f64(e.delta2), fmt_f64(e.loglik)])?,
            None => w.write_record([k.to_string(), "NA".into(), "NA".into()])?,
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
