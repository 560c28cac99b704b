//! Spatiotemporal grids and nearest-neighbour matching of simulator cells to
//! observation cells.
//!
//! Matching is done per axis. Latitude and time use absolute differences,
//! longitude uses the periodic difference on the circle. A simulator cell is
//! kept only if every axis finds an observation coordinate within half an
//! observation step (plus a small tolerance). The resulting [`MatchedGrid`]
//! is ordered by `(time, lat, lon)` and that order is what every downstream
//! reduction iterates in.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial matching tolerance in degrees.
pub const DEGREE_TOLERANCE: f64 = 1e-9;
/// Temporal matching tolerance in seconds.
pub const SECOND_TOLERANCE: i64 = 1;

/// Wraps a longitude into `[-180, 180)`.
pub fn wrap_lon(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Periodic absolute difference between two longitudes, in `[0, 180]`.
pub fn lon_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds since the Unix epoch (UTC).
    pub time: i64,
}

impl SpaceTimePoint {
    pub fn new(lat: f64, lon: f64, time: i64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidInput(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() {
            return Err(Error::InvalidInput(format!("longitude {lon} is not finite")));
        }
        if time < 0 {
            return Err(Error::InvalidInput(format!("time {time} is negative")));
        }
        // normalise -0.0 so that equality and hashing agree
        Ok(SpaceTimePoint {
            lat: lat + 0.0,
            lon: wrap_lon(lon) + 0.0,
            time,
        })
    }

    fn key(&self) -> (i64, u64, u64) {
        (self.time, (self.lat + 0.0).to_bits(), (self.lon + 0.0).to_bits())
    }
}

impl PartialEq for SpaceTimePoint {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for SpaceTimePoint {}

impl Hash for SpaceTimePoint {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl Ord for SpaceTimePoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .cmp(&other.time)
            .then(self.lat.total_cmp(&other.lat))
            .then(self.lon.total_cmp(&other.lon))
    }
}

impl PartialOrd for SpaceTimePoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SpaceTimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lat, self.lon, self.time)
    }
}

impl FromStr for SpaceTimePoint {
    type Err = Error;

    /// Parses the `lat:lon:time` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let (Some(lat), Some(lon), Some(time), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Schema(format!("malformed cell identifier '{s}'")));
        };
        let bad = |what: &str| Error::Schema(format!("bad {what} in cell identifier '{s}'"));
        SpaceTimePoint::new(
            lat.trim().parse().map_err(|_| bad("latitude"))?,
            lon.trim().parse().map_err(|_| bad("longitude"))?,
            time.trim().parse().map_err(|_| bad("time"))?,
        )
    }
}

/// A regular latitude-longitude-time lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularGrid {
    pub lat_origin: f64,
    pub lat_step: f64,
    pub lat_count: usize,
    pub lon_origin: f64,
    pub lon_step: f64,
    pub lon_count: usize,
    pub time_origin: i64,
    pub time_step: i64,
    pub time_count: usize,
}

impl RegularGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.lat_step > 0.0 && self.lon_step > 0.0 && self.time_step > 0) {
            return Err(Error::InvalidInput("grid steps must be strictly positive".into()));
        }
        if self.lat_count == 0 || self.lon_count == 0 || self.time_count == 0 {
            return Err(Error::InvalidInput("grid axes must have at least one cell".into()));
        }
        let last_lat = self.lat(self.lat_count - 1);
        if self.lat_origin < -90.0 - DEGREE_TOLERANCE || last_lat > 90.0 + DEGREE_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "latitudes [{}, {last_lat}] leave [-90, 90]",
                self.lat_origin
            )));
        }
        if self.time_origin < 0 {
            return Err(Error::InvalidInput("time origin must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn lat(&self, i: usize) -> f64 {
        (self.lat_origin + i as f64 * self.lat_step).clamp(-90.0, 90.0)
    }

    pub fn lon(&self, j: usize) -> f64 {
        wrap_lon(self.lon_origin + j as f64 * self.lon_step)
    }

    pub fn time(&self, t: usize) -> i64 {
        self.time_origin + t as i64 * self.time_step
    }

    pub fn len(&self) -> usize {
        self.lat_count * self.lon_count * self.time_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All cells in `(time, lat, lon)` order.
    pub fn points(&self) -> Vec<SpaceTimePoint> {
        let mut out = Vec::with_capacity(self.len());
        for t in 0..self.time_count {
            for i in 0..self.lat_count {
                for j in 0..self.lon_count {
                    out.push(SpaceTimePoint {
                        lat: self.lat(i) + 0.0,
                        lon: self.lon(j) + 0.0,
                        time: self.time(t),
                    });
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    fn nearest_lat(&self, lat: f64) -> Option<f64> {
        let t = (lat - self.lat_origin) / self.lat_step;
        let lo = t.floor();
        let candidates = [lo, lo + 1.0]
            .into_iter()
            .filter(|&c| c >= 0.0 && c < self.lat_count as f64)
            .map(|c| self.lat(c as usize));
        nearest(candidates, |c| (c - lat).abs(), self.lat_step / 2.0 + DEGREE_TOLERANCE)
    }

    fn nearest_lon(&self, lon: f64) -> Option<f64> {
        let t = (lon - self.lon_origin).rem_euclid(360.0) / self.lon_step;
        let lo = t.floor();
        let last = (self.lon_count - 1) as f64;
        let candidates = [lo, lo + 1.0, 0.0, last]
            .into_iter()
            .filter(|&c| c >= 0.0 && c <= last)
            .map(|c| self.lon(c as usize));
        nearest(
            candidates,
            |c| lon_distance(c, lon),
            self.lon_step / 2.0 + DEGREE_TOLERANCE,
        )
    }

    fn nearest_time(&self, time: i64) -> Option<i64> {
        let off = time - self.time_origin;
        let lo = off.div_euclid(self.time_step);
        let mut best: Option<(i64, i64)> = None;
        for c in [lo, lo + 1] {
            if c < 0 || c >= self.time_count as i64 {
                continue;
            }
            let v = self.time_origin + c * self.time_step;
            let d = (v - time).abs();
            // ties resolve to the earlier timestamp since candidates ascend
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, v));
            }
        }
        best.filter(|&(d, _)| 2 * d <= self.time_step + 2 * SECOND_TOLERANCE)
            .map(|(_, v)| v)
    }
}

fn nearest(candidates: impl Iterator<Item = f64>, dist: impl Fn(f64) -> f64, max_dist: f64) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for c in candidates {
        let d = dist(c);
        let better = match best {
            None => true,
            Some((bd, bv)) => d < bd || (d == bd && c < bv),
        };
        if better {
            best = Some((d, c));
        }
    }
    best.filter(|&(d, _)| d <= max_dist).map(|(_, v)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellPair {
    pub sim: SpaceTimePoint,
    pub sat: SpaceTimePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub lat_step: f64,
    pub lon_step: f64,
    pub time_step: i64,
}

/// Simulator cells paired with their nearest observation cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "MatchedGridRepr", into = "MatchedGridRepr")]
pub struct MatchedGrid {
    pairs: Vec<CellPair>,
    resolution: Resolution,
    index: HashMap<SpaceTimePoint, usize>,
}

#[derive(Serialize, Deserialize)]
struct MatchedGridRepr {
    resolution: Resolution,
    pairs: Vec<CellPair>,
}

impl From<MatchedGridRepr> for MatchedGrid {
    fn from(r: MatchedGridRepr) -> Self {
        MatchedGrid::from_pairs(r.pairs, r.resolution)
    }
}

impl From<MatchedGrid> for MatchedGridRepr {
    fn from(m: MatchedGrid) -> Self {
        MatchedGridRepr {
            resolution: m.resolution,
            pairs: m.pairs,
        }
    }
}

impl PartialEq for MatchedGrid {
    fn eq(&self, other: &Self) -> bool {
        self.pairs == other.pairs && self.resolution == other.resolution
    }
}

impl MatchedGrid {
    /// Builds a grid from pairs, sorting by simulator point and dropping
    /// repeated simulator cells (first occurrence wins).
    pub fn from_pairs(mut pairs: Vec<CellPair>, resolution: Resolution) -> Self {
        pairs.sort_by_key(|a| a.sim);
        pairs.dedup_by(|a, b| a.sim == b.sim);
        let index = pairs.iter().enumerate().map(|(i, p)| (p.sim, i)).collect();
        MatchedGrid {
            pairs,
            resolution,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[CellPair] {
        &self.pairs
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn sim_points(&self) -> impl Iterator<Item = SpaceTimePoint> + '_ {
        self.pairs.iter().map(|p| p.sim)
    }

    pub fn index_of(&self, sim: &SpaceTimePoint) -> Option<usize> {
        self.index.get(sim).copied()
    }

    pub fn contains(&self, sim: &SpaceTimePoint) -> bool {
        self.index.contains_key(sim)
    }

    /// Removes the given simulator points, preserving the order of the rest.
    pub fn subset_excluding(&self, excluded: &HashSet<SpaceTimePoint>) -> Result<MatchedGrid> {
        if let Some(p) = excluded.iter().find(|p| !self.contains(p)) {
            return Err(Error::UnknownPoint(*p));
        }
        let pairs = self
            .pairs
            .iter()
            .filter(|p| !excluded.contains(&p.sim))
            .copied()
            .collect();
        Ok(MatchedGrid::from_pairs(pairs, self.resolution))
    }
}

/// Pairs every simulator cell with its nearest observation cell.
pub fn match_grids(sim: &RegularGrid, sat: &RegularGrid) -> Result<MatchedGrid> {
    sim.validate()?;
    sat.validate()?;

    let lats: Vec<(f64, f64)> = sorted_unique((0..sim.lat_count).map(|i| sim.lat(i)))
        .into_iter()
        .filter_map(|v| sat.nearest_lat(v).map(|m| (v, m)))
        .collect();
    if lats.is_empty() {
        return Err(Error::NoOverlap { axis: "latitude" });
    }
    let lons: Vec<(f64, f64)> = sorted_unique((0..sim.lon_count).map(|j| sim.lon(j)))
        .into_iter()
        .filter_map(|v| sat.nearest_lon(v).map(|m| (v, m)))
        .collect();
    if lons.is_empty() {
        return Err(Error::NoOverlap { axis: "longitude" });
    }
    let times: Vec<(i64, i64)> = (0..sim.time_count)
        .map(|t| sim.time(t))
        .filter_map(|v| sat.nearest_time(v).map(|m| (v, m)))
        .collect();
    if times.is_empty() {
        return Err(Error::NoOverlap { axis: "time" });
    }

    let mut pairs = Vec::with_capacity(lats.len() * lons.len() * times.len());
    for &(st, mt) in &times {
        for &(sla, mla) in &lats {
            for &(slo, mlo) in &lons {
                pairs.push(CellPair {
                    sim: SpaceTimePoint {
                        lat: sla + 0.0,
                        lon: slo + 0.0,
                        time: st,
                    },
                    sat: SpaceTimePoint {
                        lat: mla + 0.0,
                        lon: mlo + 0.0,
                        time: mt,
                    },
                });
            }
        }
    }
    Ok(MatchedGrid::from_pairs(
        pairs,
        Resolution {
            lat_step: sim.lat_step,
            lon_step: sim.lon_step,
            time_step: sim.time_step,
        },
    ))
}

fn sorted_unique(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= DEGREE_TOLERANCE);
    v
}
