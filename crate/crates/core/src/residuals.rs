//! Alignment of emulator predictions with observations over the retained
//! cells, shared by the discrepancy estimate and all test statistics.

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::fleet::PredictionTable;
use crate::grid::MatchedGrid;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy)]
struct CellData {
    row: usize,
    z: f64,
    meas_var: f64,
}

/// Predictions and observations paired over a set of retained cells, in grid
/// order.
#[derive(Debug, Clone)]
pub struct Alignment<'a> {
    preds: &'a PredictionTable,
    cells: Vec<CellData>,
}

impl<'a> Alignment<'a> {
    pub fn new(preds: &'a PredictionTable, obs: &ObservationSet, mstar: &MatchedGrid) -> Result<Self> {
        if mstar.is_empty() {
            return Err(Error::Domain("no cells remain after exclusions".into()));
        }
        let cells = mstar
            .sim_points()
            .map(|p| {
                let row = preds.row_of(&p).ok_or(Error::UnknownPoint(p))?;
                let o = obs.get(&p).ok_or(Error::UnknownPoint(p))?;
                let z =
                    o.z.ok_or_else(|| Error::InvalidInput(format!("cell {p} has no observation but is retained")))?;
                Ok(CellData {
                    row,
                    z,
                    meas_var: o.meas_var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Alignment { preds, cells })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn n_tests(&self) -> usize {
        self.preds.n_tests()
    }

    pub fn preds(&self) -> &PredictionTable {
        self.preds
    }

    pub(crate) fn check_k(&self, k: usize) -> Result<()> {
        if k >= self.n_tests() {
            return Err(Error::InvalidInput(format!(
                "test index {k} out of range ({} tests)",
                self.n_tests()
            )));
        }
        Ok(())
    }

    /// `(emulator mean - observation, emulator variance + measurement variance)`
    /// for each retained cell at test parameter `k`.
    pub fn terms(&self, k: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.cells
            .iter()
            .map(move |c| (self.preds.mean(c.row, k) - c.z, self.preds.var(c.row, k) + c.meas_var))
    }

    /// `|residual| / sqrt(total variance)` per cell, failing on zero variance.
    pub fn standardized(&self, k: usize, delta2: f64) -> Result<Vec<f64>> {
        self.terms(k)
            .map(|(r, v)| {
                let s2 = v + delta2;
                if s2 > 0.0 {
                    Ok(r.abs() / s2.sqrt())
                } else {
                    Err(Error::Domain("zero total variance at a retained cell".into()))
                }
            })
            .collect()
    }

    pub fn mean_meas_var(&self) -> f64 {
        compensated_sum(self.cells.iter().map(|c| c.meas_var)) / self.len() as f64
    }

    pub fn mean_emu_var(&self, k: usize) -> f64 {
        compensated_sum(self.cells.iter().map(|c| self.preds.var(c.row, k))) / self.len() as f64
    }
}
