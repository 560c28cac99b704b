//! Parameter space, ensemble and observation ingestion, and test-parameter
//! sampling.
//!
//! File formats:
//!
//! * ensemble CSV: `member,param:<name>...,cell:<lat>:<lon>:<time>...`, one row
//!   per member, cell columns keyed by simulator cell;
//! * observation CSV: `lat,lon,time,z,meas_var`, keyed by observation cell,
//!   `z` empty when the retrieval is missing;
//! * parameter space JSON: `[{"name": .., "min": .., "max": ..}, ..]`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MatchedGrid, SpaceTimePoint};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Schema(format!("cannot parse {what} '{field}'")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ParameterRange {
    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParameterRange>", into = "Vec<ParameterRange>")]
pub struct ParameterSpace {
    ranges: Vec<ParameterRange>,
}

impl TryFrom<Vec<ParameterRange>> for ParameterSpace {
    type Error = Error;

    fn try_from(ranges: Vec<ParameterRange>) -> Result<Self> {
        ParameterSpace::new(ranges)
    }
}

impl From<ParameterSpace> for Vec<ParameterRange> {
    fn from(s: ParameterSpace) -> Self {
        s.ranges
    }
}

impl ParameterSpace {
    pub fn new(ranges: Vec<ParameterRange>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidInput("parameter space has no dimensions".into()));
        }
        let mut seen = HashSet::new();
        for r in &ranges {
            if !(r.min.is_finite() && r.max.is_finite() && r.min < r.max) {
                return Err(Error::InvalidInput(format!(
                    "parameter {} has invalid range [{}, {}]",
                    r.name, r.min, r.max
                )));
            }
            if !seen.insert(r.name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate parameter name {}", r.name)));
            }
        }
        Ok(ParameterSpace { ranges })
    }

    /// Unit hypercube with parameters named `u0`, `u1`, ...
    pub fn unit(dim: usize) -> Self {
        ParameterSpace::new(
            (0..dim)
                .map(|i| ParameterRange {
                    name: format!("u{i}"),
                    min: 0.0,
                    max: 1.0,
                })
                .collect(),
        )
        .expect("unit box is valid")
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[ParameterRange] {
        &self.ranges
    }

    pub fn widths(&self) -> Vec<f64> {
        self.ranges.iter().map(ParameterRange::width).collect()
    }

    /// Validates `values` against the box.
    pub fn vector(&self, values: Vec<f64>) -> Result<ParameterVector> {
        if values.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.dim(),
                values.len()
            )));
        }
        for (r, &v) in self.ranges.iter().zip(&values) {
            if !(v >= r.min && v <= r.max) {
                return Err(Error::RangeViolation {
                    name: r.name.clone(),
                    value: v,
                });
            }
        }
        Ok(ParameterVector(values))
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, unit: &[f64]) -> ParameterVector {
        ParameterVector(
            self.ranges
                .iter()
                .zip(unit)
                .map(|(r, &t)| (r.min + t * r.width()).clamp(r.min, r.max))
                .collect(),
        )
    }

    pub fn to_unit(&self, u: &ParameterVector) -> Vec<f64> {
        self.ranges
            .iter()
            .zip(u.values())
            .map(|(r, &v)| (v - r.min) / r.width())
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    /// Wraps raw values without range validation.
    pub fn new_unchecked(values: Vec<f64>) -> Self {
        ParameterVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Simulator outputs of a perturbed-parameter ensemble on a matched grid.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    grid: MatchedGrid,
    members: Vec<ParameterVector>,
    /// `outputs[cell][member]`, cells in grid order.
    outputs: Vec<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(grid: MatchedGrid, members: Vec<ParameterVector>, outputs: Vec<Vec<f64>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let p = members[0].dim();
        if members.iter().any(|m| m.dim() != p) {
            return Err(Error::InvalidInput("ensemble members differ in dimension".into()));
        }
        if outputs.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "outputs cover {} cells, grid has {}",
                outputs.len(),
                grid.len()
            )));
        }
        for (cell, row) in grid.sim_points().zip(&outputs) {
            if row.len() != members.len() {
                return Err(Error::InvalidInput(format!("cell {cell} has {} outputs", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("cell {cell} has a non-finite output")));
            }
        }
        Ok(TrainingSet { grid, members, outputs })
    }

    pub fn grid(&self) -> &MatchedGrid {
        &self.grid
    }

    pub fn members(&self) -> &[ParameterVector] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn cell_outputs(&self, cell: usize) -> &[f64] {
        &self.outputs[cell]
    }

    pub fn output(&self, cell: &SpaceTimePoint, member: usize) -> Option<f64> {
        self.grid.index_of(cell).map(|i| self.outputs[i][member])
    }

    /// Restricts to the given simulator cells, keeping grid order.
    pub fn restrict(&self, keep: &MatchedGrid) -> Result<TrainingSet> {
        let outputs = keep
            .sim_points()
            .map(|p| {
                self.grid
                    .index_of(&p)
                    .map(|i| self.outputs[i].clone())
                    .ok_or(Error::UnknownPoint(p))
            })
            .collect::<Result<_>>()?;
        TrainingSet::new(keep.clone(), self.members.clone(), outputs)
    }
}

pub fn write_ensemble(path: &Path, space: &ParameterSpace, train: &TrainingSet) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let mut header = vec!["member".to_string()];
    header.extend(space.ranges().iter().map(|r| format!("param:{}", r.name)));
    header.extend(train.grid().sim_points().map(|p| format!("cell:{p}")));
    w.write_record(&header)?;
    for (j, member) in train.members().iter().enumerate() {
        let mut row = vec![j.to_string()];
        row.extend(member.values().iter().map(|&v| fmt_f64(v)));
        row.extend((0..train.grid().len()).map(|c| fmt_f64(train.outputs[c][j])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an ensemble CSV, keeping the columns of the cells in `grid`.
///
/// Cell columns for cells outside `grid` are ignored.
pub fn load_ensemble(path: &Path, space: &ParameterSpace, grid: &MatchedGrid) -> Result<TrainingSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    let header = r.headers()?.clone();

    let mut param_cols = HashMap::new();
    let mut cell_cols = HashMap::new();
    for (i, h) in header.iter().enumerate() {
        if let Some(name) = h.strip_prefix("param:") {
            param_cols.insert(name.to_string(), i);
        } else if let Some(id) = h.strip_prefix("cell:") {
            cell_cols.insert(id.parse::<SpaceTimePoint>()?, i);
        } else if h != "member" {
            return Err(Error::Schema(format!("unexpected ensemble column '{h}'")));
        }
    }
    let param_idx: Vec<usize> = space
        .ranges()
        .iter()
        .map(|p| {
            param_cols
                .get(&p.name)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing column param:{}", p.name)))
        })
        .collect::<Result<_>>()?;
    let cell_idx: Vec<usize> = grid
        .sim_points()
        .map(|p| {
            cell_cols
                .get(&p)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing column cell:{p}")))
        })
        .collect::<Result<_>>()?;

    let mut members = Vec::new();
    let mut outputs = vec![Vec::new(); grid.len()];
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Schema("short ensemble row".into()));
        let values = param_idx
            .iter()
            .map(|&i| parse_f64(field(i)?, "parameter value"))
            .collect::<Result<Vec<_>>>()?;
        members.push(space.vector(values)?);
        for (c, &i) in cell_idx.iter().enumerate() {
            outputs[c].push(parse_f64(field(i)?, "cell output")?);
        }
    }
    TrainingSet::new(grid.clone(), members, outputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Observed value, `None` where the retrieval is missing.
    pub z: Option<f64>,
    /// Measurement-error variance; meaningful only when `z` is present.
    pub meas_var: f64,
}

impl Observation {
    pub const MISSING: Observation = Observation { z: None, meas_var: 0.0 };
}

/// Observations aligned with a matched grid (one entry per simulator cell).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    grid: MatchedGrid,
    obs: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(grid: MatchedGrid, obs: Vec<Observation>) -> Result<Self> {
        if obs.len() != grid.len() {
            return Err(Error::InvalidInput("observation count differs from grid size".into()));
        }
        for (p, o) in grid.sim_points().zip(&obs) {
            if let Some(z) = o.z {
                if !z.is_finite() || !o.meas_var.is_finite() || o.meas_var < 0.0 {
                    return Err(Error::Schema(format!(
                        "cell {p}: invalid observation z={z}, meas_var={}",
                        o.meas_var
                    )));
                }
            }
        }
        Ok(ObservationSet { grid, obs })
    }

    pub fn grid(&self) -> &MatchedGrid {
        &self.grid
    }

    pub fn get(&self, cell: &SpaceTimePoint) -> Option<&Observation> {
        self.grid.index_of(cell).map(|i| &self.obs[i])
    }

    pub fn as_slice(&self) -> &[Observation] {
        &self.obs
    }

    pub fn missing_points(&self) -> HashSet<SpaceTimePoint> {
        self.grid
            .sim_points()
            .zip(&self.obs)
            .filter(|(_, o)| o.z.is_none())
            .map(|(p, _)| p)
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRow {
    lat: f64,
    lon: f64,
    time: i64,
    z: Option<f64>,
    meas_var: Option<f64>,
}

/// Writes one row per distinct observation cell.
pub fn write_observations(path: &Path, obs: &ObservationSet) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record(["lat", "lon", "time", "z", "meas_var"])?;
    let mut seen = HashSet::new();
    for (pair, o) in obs.grid.pairs().iter().zip(&obs.obs) {
        if !seen.insert(pair.sat) {
            continue;
        }
        let (z, v) = match o.z {
            Some(z) => (fmt_f64(z), fmt_f64(o.meas_var)),
            None => (String::new(), String::new()),
        };
        w.write_record([
            pair.sat.lat.to_string(),
            pair.sat.lon.to_string(),
            pair.sat.time.to_string(),
            z,
            v,
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads observations keyed by observation cell and aligns them with `grid`.
/// Grid cells without a row are treated as missing.
pub fn load_observations(path: &Path, grid: &MatchedGrid) -> Result<ObservationSet> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    let mut by_sat: HashMap<SpaceTimePoint, Observation> = HashMap::new();
    for row in r.deserialize() {
        let row: ObservationRow = row?;
        let p = SpaceTimePoint::new(row.lat, row.lon, row.time)?;
        let o = match (row.z, row.meas_var) {
            (None, _) => Observation::MISSING,
            (Some(_), None) => return Err(Error::Schema(format!("cell {p}: observation without meas_var"))),
            (Some(z), Some(v)) => {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Schema(format!("cell {p}: invalid meas_var {v}")));
                }
                Observation {
                    z: Some(z),
                    meas_var: v,
                }
            }
        };
        by_sat.insert(p, o);
    }
    let obs = grid
        .pairs()
        .iter()
        .map(|pair| by_sat.get(&pair.sat).copied().unwrap_or(Observation::MISSING))
        .collect();
    ObservationSet::new(grid.clone(), obs)
}

/// Variance budget of the data model: measurement + emulation + discrepancy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub other_var: f64,
}

impl NoiseModel {
    pub fn new(other_var: f64) -> Result<Self> {
        if !(other_var >= 0.0 && other_var.is_finite()) {
            return Err(Error::InvalidInput(format!("discrepancy variance {other_var} < 0")));
        }
        Ok(NoiseModel { other_var })
    }

    pub fn total(&self, meas_var: f64, emu_var: f64) -> f64 {
        meas_var + emu_var + self.other_var
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    Uniform,
    LatinHypercube,
}

/// Draws `count` parameter vectors from the box, reproducibly from `seed`.
pub fn sample_test_parameters(
    space: &ParameterSpace,
    count: usize,
    seed: u64,
    strategy: SamplingStrategy,
) -> Result<Vec<ParameterVector>> {
    if count == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = space.dim();
    let unit: Vec<Vec<f64>> = match strategy {
        SamplingStrategy::Uniform => (0..count)
            .map(|_| (0..p).map(|_| rng.random::<f64>()).collect())
            .collect(),
        SamplingStrategy::LatinHypercube => {
            let mut cols = Vec::with_capacity(p);
            for _ in 0..p {
                let mut strata: Vec<usize> = (0..count).collect();
                strata.shuffle(&mut rng);
                cols.push(
                    strata
                        .into_iter()
                        .map(|s| (s as f64 + rng.random::<f64>()) / count as f64)
                        .collect::<Vec<_>>(),
                );
            }
            (0..count).map(|k| cols.iter().map(|c| c[k]).collect()).collect()
        }
    };
    Ok(unit.iter().map(|t| space.from_unit(t)).collect())
}

pub fn write_parameters(path: &Path, space: &ParameterSpace, params: &[ParameterVector]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let mut header = vec!["k".to_string()];
    header.extend(space.ranges().iter().map(|r| r.name.clone()));
    w.write_record(&header)?;
    for (k, u) in params.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(u.values().iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_parameters(path: &Path, space: &ParameterSpace) -> Result<Vec<ParameterVector>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(1)
            .map(|s| parse_f64(s, "parameter value"))
            .collect::<Result<Vec<_>>>()?;
        out.push(space.vector(values)?);
    }
    Ok(out)
}
