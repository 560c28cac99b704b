//! Exclusion of cells whose observation is far from the emulator at every
//! test parameter.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{fmt_f64, ObservationSet};
use crate::error::{Error, Result};
use crate::fleet::PredictionTable;
use crate::grid::{MatchedGrid, SpaceTimePoint};
use crate::residuals::compensated_sum;

/// Standardized distance `|mean - z| / sqrt(var_emu + meas_var + gamma^2)`.
pub fn j_metric(mean: f64, var_emu: f64, meas_var: f64, z: f64, gamma: f64) -> Result<f64> {
    if var_emu < 0.0 || meas_var < 0.0 || gamma < 0.0 {
        return Err(Error::InvalidInput("variances and gamma must be nonnegative".into()));
    }
    let denom = var_emu + meas_var + gamma * gamma;
    if !(denom > 0.0) {
        return Err(Error::Domain("zero denominator in the outlier metric".into()));
    }
    if denom.is_infinite() {
        return Ok(0.0);
    }
    Ok((mean - z).abs() / denom.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Retained,
    Outlier,
    Missing,
    /// The cell's emulator could not be fitted.
    NoEmulator,
}

impl CellStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellStatus::Retained => "retained",
            CellStatus::Outlier => "outlier",
            CellStatus::Missing => "missing",
            CellStatus::NoEmulator => "no_emulator",
        }
    }

    pub fn is_excluded(&self) -> bool {
        *self != CellStatus::Retained
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellVerdict {
    pub cell: SpaceTimePoint,
    /// Minimum of J over test parameters; `None` for cells not evaluated.
    pub min_j: Option<f64>,
    /// J at the globally best-fitting test parameter (QQ-plot input).
    pub j_at_best: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub gamma: f64,
    pub threshold: f64,
    /// Test parameter with the smallest sum of squared residuals.
    pub best_k: usize,
    pub cells: Vec<CellVerdict>,
    pub fraction_excluded: f64,
}

/// Quantile `1 - 1/(2 m)` of the standard half-normal.
pub fn default_threshold(m: usize) -> f64 {
    let p = 1.0 - 1.0 / (2.0 * m.max(1) as f64);
    half_normal_quantile(p)
}

pub fn half_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 * (1.0 + p))
}

struct Evaluated {
    row: usize,
    z: f64,
    meas_var: f64,
}

/// Flags every matched cell as retained, outlier, missing or lacking an
/// emulator. `gamma` defaults to the residual standard deviation at the
/// best-fitting test parameter and `threshold` to [`default_threshold`] of
/// the matched-grid size.
pub fn find_outliers(
    preds: &PredictionTable,
    obs: &ObservationSet,
    gamma: Option<f64>,
    threshold: Option<f64>,
) -> Result<FilterReport> {
    let grid = obs.grid();
    let n_tests = preds.n_tests();
    if n_tests == 0 {
        return Err(Error::InvalidInput("no test parameters".into()));
    }
    let entries: Vec<(SpaceTimePoint, Option<Evaluated>, CellStatus)> = grid
        .sim_points()
        .zip(obs.as_slice())
        .map(|(p, o)| match (o.z, preds.row_of(&p)) {
            (None, _) => (p, None, CellStatus::Missing),
            (Some(_), None) => (p, None, CellStatus::NoEmulator),
            (Some(z), Some(row)) => (
                p,
                Some(Evaluated {
                    row,
                    z,
                    meas_var: o.meas_var,
                }),
                CellStatus::Retained,
            ),
        })
        .collect();
    let evaluated: Vec<&Evaluated> = entries.iter().filter_map(|(_, e, _)| e.as_ref()).collect();

    let sse: Vec<f64> = (0..n_tests)
        .into_par_iter()
        .map(|k| compensated_sum(evaluated.iter().map(|e| (preds.mean(e.row, k) - e.z).powi(2))))
        .collect();
    let mut best_k = 0;
    for (k, s) in sse.iter().enumerate() {
        if *s < sse[best_k] {
            best_k = k;
        }
    }

    let gamma = match gamma {
        Some(g) if g >= 0.0 && !g.is_nan() => g,
        Some(g) => return Err(Error::InvalidInput(format!("gamma = {g} must be >= 0"))),
        None => {
            let r: Vec<f64> = evaluated.iter().map(|e| preds.mean(e.row, best_k) - e.z).collect();
            if r.len() < 2 {
                0.0
            } else {
                let n = r.len() as f64;
                let mean = compensated_sum(r.iter().copied()) / n;
                (compensated_sum(r.iter().map(|x| (x - mean).powi(2))) / (n - 1.0)).sqrt()
            }
        }
    };
    let threshold = match threshold {
        Some(t) if !t.is_nan() => t,
        Some(_) => return Err(Error::InvalidInput("threshold is NaN".into())),
        None => default_threshold(grid.len()),
    };

    let cells: Vec<CellVerdict> = entries
        .par_iter()
        .map(|(p, e, status)| {
            let Some(e) = e else {
                return Ok(CellVerdict {
                    cell: *p,
                    min_j: None,
                    j_at_best: None,
                    status: *status,
                });
            };
            let mut min_j = f64::INFINITY;
            let mut at_best = 0.0;
            for k in 0..n_tests {
                let j = j_metric(preds.mean(e.row, k), preds.var(e.row, k), e.meas_var, e.z, gamma)?;
                min_j = min_j.min(j);
                if k == best_k {
                    at_best = j;
                }
            }
            Ok(CellVerdict {
                cell: *p,
                min_j: Some(min_j),
                j_at_best: Some(at_best),
                status: if min_j > threshold {
                    CellStatus::Outlier
                } else {
                    CellStatus::Retained
                },
            })
        })
        .collect::<Result<_>>()?;

    let excluded = cells.iter().filter(|c| c.status.is_excluded()).count();
    let fraction_excluded = if cells.is_empty() {
        0.0
    } else {
        excluded as f64 / cells.len() as f64
    };
    Ok(FilterReport {
        gamma,
        threshold,
        best_k,
        cells,
        fraction_excluded,
    })
}

impl FilterReport {
    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|c| c.status == status).count()
    }

    pub fn excluded(&self) -> HashSet<SpaceTimePoint> {
        self.cells
            .iter()
            .filter(|c| c.status.is_excluded())
            .map(|c| c.cell)
            .collect()
    }

    /// The matched grid without the excluded cells.
    pub fn mstar(&self, grid: &MatchedGrid) -> Result<MatchedGrid> {
        grid.subset_excluding(&self.excluded())
    }

    /// Sorted J values at the best-fitting test parameter paired with
    /// half-normal plotting positions `(i + 0.5) / n`.
    pub fn qq_points(&self) -> Vec<(f64, f64)> {
        let mut j: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.status == CellStatus::Retained || c.status == CellStatus::Outlier)
            .filter_map(|c| c.j_at_best)
            .collect();
        j.sort_by(f64::total_cmp);
        let n = j.len() as f64;
        j.iter()
            .enumerate()
            .map(|(i, v)| (half_normal_quantile((i as f64 + 0.5) / n), *v))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(f));
        w.write_record(["cell", "min_J", "reason"])?;
        for c in &self.cells {
            let j = c.min_j.map(fmt_f64).unwrap_or_else(|| "NA".into());
            w.write_record([c.cell.to_string(), j, c.status.as_str().to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_qq(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(f));
        w.write_record(["half_normal_quantile", "J"])?;
        for (t, j) in self.qq_points() {
            w.write_record([fmt_f64(t), fmt_f64(j)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}
