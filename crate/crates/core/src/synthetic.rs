//! Synthetic ground truth: an analytic stand-in for the simulator, an
//! ensemble run on it, and observations drawn from it at a known parameter
//! with Gaussian measurement error and discrepancy.
//!
//! Each cell's response in unit coordinates `t` is
//!
//! ```text
//! f(t) = b + s * t[0] + sum_r w_r * exp(-(a_r . t - c_r)^2 / (2 h_r^2))
//! ```
//!
//! with all coefficients drawn from a stream seeded by the family seed and the
//! cell. `s > 0`; on monotone cells the ridge directions ignore `t[0]`, so the
//! response increases strictly with the first parameter.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_test_parameters, write_ensemble, write_observations, Observation, ObservationSet, ParameterSpace,
    ParameterVector, SamplingStrategy, TrainingSet,
};
use crate::error::{Error, Result};
use crate::fleet::{cell_seed, splitmix64};
use crate::grid::{match_grids, MatchedGrid, RegularGrid, SpaceTimePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardFamily {
    pub seed: u64,
    pub ridges: usize,
    /// Scale of the ridge weights.
    pub amplitude: f64,
    /// Scale of the linear slope in the first parameter.
    pub slope: f64,
    /// Fraction of cells whose response is monotone in the first parameter.
    pub monotone_fraction: f64,
}

impl Default for ForwardFamily {
    fn default() -> Self {
        ForwardFamily {
            seed: 1,
            ridges: 3,
            amplitude: 1.0,
            slope: 1.0,
            monotone_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub space: ParameterSpace,
    pub sim_grid: RegularGrid,
    pub sat_grid: RegularGrid,
    pub u_star: Vec<f64>,
    pub delta2: f64,
    /// Per-cell measurement variances are uniform on this interval.
    pub meas_var: (f64, f64),
    pub family: ForwardFamily,
    pub n_members: usize,
    pub design_seed: u64,
    pub noise_seed: u64,
    #[serde(default)]
    pub outlier_fraction: f64,
    /// Outlier offset in units of the cell's noise standard deviation.
    #[serde(default = "default_outlier_shift")]
    pub outlier_shift: f64,
    #[serde(default)]
    pub missing_fraction: f64,
}

fn default_outlier_shift() -> f64 {
    10.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.space.vector(self.u_star.clone())?;
        let (lo, hi) = self.meas_var;
        if !(self.delta2 >= 0.0 && lo >= 0.0 && hi >= lo) {
            return Err(Error::InvalidInput(
                "variances must be nonnegative with min <= max".into(),
            ));
        }
        if self.n_members < 2 {
            return Err(Error::InvalidInput("need at least 2 ensemble members".into()));
        }
        let fractions = [
            self.outlier_fraction,
            self.missing_fraction,
            self.family.monotone_fraction,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || self.outlier_fraction + self.missing_fraction > 1.0 {
            return Err(Error::InvalidInput("fractions must lie in [0, 1]".into()));
        }
        if self.family.ridges == 0 && self.family.slope == 0.0 {
            return Err(Error::InvalidInput("forward family is constant".into()));
        }
        Ok(())
    }
}

/// Coefficients of one cell's response.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResponse {
    pub offset: f64,
    pub slope: f64,
    pub weights: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub monotone: bool,
}

impl CellResponse {
    pub fn new(family: &ForwardFamily, dim: usize, cell: &SpaceTimePoint) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(family.seed, cell));
        let monotone = rng.random::<f64>() < family.monotone_fraction;
        let offset = rng.random_range(-1.0..1.0);
        let slope = family.slope * rng.random_range(0.5..1.5);
        let mut r = CellResponse {
            offset,
            slope,
            weights: Vec::with_capacity(family.ridges),
            directions: Vec::with_capacity(family.ridges),
            centers: Vec::with_capacity(family.ridges),
            widths: Vec::with_capacity(family.ridges),
            monotone,
        };
        for _ in 0..family.ridges {
            let mut a: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if monotone && dim > 1 {
                a[0] = 0.0;
            }
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            a.iter_mut().for_each(|x| *x /= norm);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            r.weights.push(sign * family.amplitude * rng.random_range(0.5..1.5));
            r.centers
                .push(rng.random_range(-0.5..0.5) + 0.5 * a.iter().sum::<f64>());
            r.widths.push(rng.random_range(0.3..0.8));
            r.directions.push(a);
        }
        if monotone && dim == 1 {
            r.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        r
    }

    /// Response at unit coordinates `t`.
    pub fn eval(&self, t: &[f64]) -> f64 {
        let mut y = self.offset + self.slope * t[0];
        for (((w, a), c), h) in self
            .weights
            .iter()
            .zip(&self.directions)
            .zip(&self.centers)
            .zip(&self.widths)
        {
            let s = dot(a, t) - c;
            y += w * (-s * s / (2.0 * h * h)).exp();
        }
        y
    }

    /// Gradient with respect to the unit coordinates.
    pub fn gradient(&self, t: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; t.len()];
        g[0] = self.slope;
        for (((w, a), c), h) in self
            .weights
            .iter()
            .zip(&self.directions)
            .zip(&self.centers)
            .zip(&self.widths)
        {
            let s = dot(a, t) - c;
            let d = -w * s / (h * h) * (-s * s / (2.0 * h * h)).exp();
            for (gi, ai) in g.iter_mut().zip(a) {
                *gi += d * ai;
            }
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The analytic forward model at parameter `u` in cell `cell`.
pub fn forward(spec: &SyntheticSpec, cell: &SpaceTimePoint, u: &ParameterVector) -> f64 {
    CellResponse::new(&spec.family, spec.space.dim(), cell).eval(&spec.space.to_unit(u))
}

/// Derivative of [`forward`] with respect to `u` (not the unit coordinates).
pub fn forward_gradient(spec: &SyntheticSpec, cell: &SpaceTimePoint, u: &ParameterVector) -> Vec<f64> {
    let g = CellResponse::new(&spec.family, spec.space.dim(), cell).gradient(&spec.space.to_unit(u));
    g.iter().zip(spec.space.widths()).map(|(gi, w)| gi / w).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub u_star: Vec<f64>,
    pub delta2: f64,
    /// Noise-free response at `u_star` per cell, grid order.
    pub zeta: Vec<f64>,
    pub meas_var: Vec<f64>,
    pub outliers: Vec<SpaceTimePoint>,
    pub missing: Vec<SpaceTimePoint>,
}

impl Truth {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub training: TrainingSet,
    pub observations: ObservationSet,
    pub truth: Truth,
}

fn pick(m: usize, count: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    sample(rng, m, count.min(m)).into_iter().collect()
}

/// Builds the ensemble and observations described by `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let grid = match_grids(&spec.sim_grid, &spec.sat_grid)?;
    let members = sample_test_parameters(
        &spec.space,
        spec.n_members,
        spec.design_seed,
        SamplingStrategy::LatinHypercube,
    )?;
    let u_star = spec.space.vector(spec.u_star.clone())?;
    let t_star = spec.space.to_unit(&u_star);
    let unit_members: Vec<Vec<f64>> = members.iter().map(|u| spec.space.to_unit(u)).collect();
    let cells: Vec<SpaceTimePoint> = grid.sim_points().collect();
    let dim = spec.space.dim();
    let (lo, hi) = spec.meas_var;

    let per_cell: Vec<(Vec<f64>, f64, f64, f64)> = cells
        .par_iter()
        .map(|cell| {
            let resp = CellResponse::new(&spec.family, dim, cell);
            let outputs = unit_members.iter().map(|t| resp.eval(t)).collect();
            let zeta = resp.eval(&t_star);
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(spec.noise_seed, cell));
            let meas = lo + (hi - lo) * rng.random::<f64>();
            let eps: f64 = StandardNormal.sample(&mut rng);
            (outputs, zeta, meas, eps)
        })
        .collect();

    let m = cells.len();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.noise_seed ^ 0x6f75_746c_6965_7273));
    let n_out = (spec.outlier_fraction * m as f64).round() as usize;
    let n_miss = (spec.missing_fraction * m as f64).round() as usize;
    let chosen = pick(m, n_out + n_miss, &mut rng);
    let chosen: Vec<usize> = chosen.into_iter().collect();
    let mut order: Vec<usize> = (0..chosen.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let outlier_idx: BTreeSet<usize> = order[..n_out.min(order.len())].iter().map(|&i| chosen[i]).collect();
    let missing_idx: BTreeSet<usize> = order[n_out.min(order.len())..].iter().map(|&i| chosen[i]).collect();

    let mut outputs = Vec::with_capacity(m);
    let mut obs = Vec::with_capacity(m);
    let mut zeta = Vec::with_capacity(m);
    let mut meas_var = Vec::with_capacity(m);
    for (i, (out, z0, meas, eps)) in per_cell.into_iter().enumerate() {
        let sd = (meas + spec.delta2).sqrt();
        let mut z = z0 + sd * eps;
        if outlier_idx.contains(&i) {
            z += spec.outlier_shift * sd;
        }
        obs.push(if missing_idx.contains(&i) {
            Observation::MISSING
        } else {
            Observation {
                z: Some(z),
                meas_var: meas,
            }
        });
        outputs.push(out);
        zeta.push(z0);
        meas_var.push(meas);
    }
    let truth = Truth {
        u_star: spec.u_star.clone(),
        delta2: spec.delta2,
        zeta,
        meas_var,
        outliers: outlier_idx.iter().map(|&i| cells[i]).collect(),
        missing: missing_idx.iter().map(|&i| cells[i]).collect(),
    };
    Ok(SyntheticData {
        training: TrainingSet::new(grid.clone(), members, outputs)?,
        observations: ObservationSet::new(grid, obs)?,
        truth,
    })
}

/// Oracle predictions: the forward model itself, with zero emulator variance.
pub fn oracle_predictions(
    spec: &SyntheticSpec,
    grid: &MatchedGrid,
    tests: &[ParameterVector],
) -> Result<crate::fleet::PredictionTable> {
    let dim = spec.space.dim();
    let unit: Vec<Vec<f64>> = tests.iter().map(|u| spec.space.to_unit(u)).collect();
    let cells: Vec<SpaceTimePoint> = grid.sim_points().collect();
    let rows: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|c| {
            let r = CellResponse::new(&spec.family, dim, c);
            unit.iter().map(|t| r.eval(t)).collect()
        })
        .collect();
    let mean: Vec<f64> = rows.into_iter().flatten().collect();
    let var = vec![0.0; mean.len()];
    crate::fleet::PredictionTable::new(cells, tests.to_vec(), mean, var)
}

/// Writes `ensemble.csv`, `observations.csv` and `truth.json` into `dir`.
pub fn write_synthetic(dir: &Path, space: &ParameterSpace, data: &SyntheticData) -> Result<()> {
    write_ensemble(&dir.join("ensemble.csv"), space, &data.training)?;
    write_observations(&dir.join("observations.csv"), &data.observations)?;
    data.truth.save(&dir.join("truth.json"))
}

/// A square lat-lon patch with one time step, `side * side` cells.
pub fn square_grid(side: usize) -> RegularGrid {
    RegularGrid {
        lat_origin: -30.0,
        lat_step: 1.0,
        lat_count: side,
        lon_origin: 0.0,
        lon_step: 1.0,
        lon_count: side,
        time_origin: 0,
        time_step: 86_400,
        time_count: 1,
    }
}

/// A grid of `lat_count * lon_count` cells with one time step.
pub fn patch_grid(lat_count: usize, lon_count: usize) -> RegularGrid {
    RegularGrid {
        lat_count,
        lon_count,
        ..square_grid(1)
    }
}

impl SyntheticSpec {
    /// A unit-box spec over `lat_count * lon_count` cells.
    pub fn example(dim: usize, lat_count: usize, lon_count: usize, n_members: usize, seed: u64) -> Self {
        let space = ParameterSpace::unit(dim);
        let grid = patch_grid(lat_count, lon_count);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
        SyntheticSpec {
            space,
            sim_grid: grid.clone(),
            sat_grid: grid,
            u_star: (0..dim).map(|_| rng.random_range(0.2..0.8)).collect(),
            delta2: 0.01,
            meas_var: (0.002, 0.008),
            family: ForwardFamily {
                seed: splitmix64(seed ^ 1),
                ..ForwardFamily::default()
            },
            n_members,
            design_seed: splitmix64(seed ^ 2),
            noise_seed: splitmix64(seed ^ 3),
            outlier_fraction: 0.0,
            outlier_shift: default_outlier_shift(),
            missing_fraction: 0.0,
        }
    }
}
