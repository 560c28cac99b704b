//! The confidence set obtained by keeping every tested parameter that the
//! test did not reject, and its one- and two-dimensional summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, ParameterSpace, ParameterVector};
use crate::error::{Error, Result};
use crate::plausibility::TestOutcome;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    /// Indices into the test sample of the retained parameters.
    pub indices: Vec<usize>,
    pub retained: Vec<ParameterVector>,
    pub level: f64,
    pub config_hash: String,
}

impl ConfidenceSet {
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn write_csv(&self, path: &Path, space: &ParameterSpace) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(f));
        let mut header = vec!["k".to_string()];
        header.extend(space.ranges().iter().map(|r| r.name.clone()));
        w.write_record(&header)?;
        for (k, u) in self.indices.iter().zip(&self.retained) {
            let mut row = vec![k.to_string()];
            row.extend(u.values().iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_aligned(outcomes: &[TestOutcome], tests: &[ParameterVector]) -> Result<()> {
    if outcomes.len() != tests.len() || outcomes.iter().enumerate().any(|(i, o)| o.k != i) {
        return Err(Error::InvalidInput(
            "outcomes are not aligned with the test sample".into(),
        ));
    }
    Ok(())
}

/// Keeps the parameters that were not rejected.
pub fn invert(outcomes: &[TestOutcome], tests: &[ParameterVector], config_hash: &str) -> Result<ConfidenceSet> {
    check_aligned(outcomes, tests)?;
    let level = outcomes.first().map_or(f64::NAN, |o| o.level);
    let indices: Vec<usize> = outcomes.iter().filter(|o| !o.reject).map(|o| o.k).collect();
    let retained = indices.iter().map(|&k| tests[k].clone()).collect();
    Ok(ConfidenceSet {
        indices,
        retained,
        level,
        config_hash: config_hash.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub coordinate: f64,
    pub statistic: f64,
    pub reject: bool,
}

/// Statistic against one coordinate, sorted by the coordinate.
pub fn project_1d(tests: &[ParameterVector], outcomes: &[TestOutcome], axis: usize) -> Result<Vec<ScatterPoint>> {
    check_aligned(outcomes, tests)?;
    if tests.first().is_some_and(|u| axis >= u.dim()) {
        return Err(Error::InvalidInput(format!("axis {axis} out of range")));
    }
    let mut pts: Vec<ScatterPoint> = tests
        .iter()
        .zip(outcomes)
        .map(|(u, o)| ScatterPoint {
            coordinate: u.values()[axis],
            statistic: o.statistic,
            reject: o.reject,
        })
        .collect();
    pts.sort_by(|a, b| a.coordinate.total_cmp(&b.coordinate));
    Ok(pts)
}

pub fn write_projection_1d(path: &Path, name: &str, critical: f64, pts: &[ScatterPoint]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    w.write_record([name, "statistic", "reject", "critical"])?;
    for p in pts {
        w.write_record([
            fmt_f64(p.coordinate),
            fmt_f64(p.statistic),
            p.reject.to_string(),
            fmt_f64(critical),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = (v - lo) / (hi - lo) * bins as f64;
    (t.floor().max(0.0) as usize).min(bins - 1)
}

/// Tested and retained counts per bin along one axis of the parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram1D {
    pub axis: usize,
    pub edges: Vec<f64>,
    pub tested: Vec<usize>,
    pub retained: Vec<usize>,
}

pub fn histogram_1d(
    space: &ParameterSpace,
    tests: &[ParameterVector],
    outcomes: &[TestOutcome],
    axis: usize,
    bins: usize,
) -> Result<Histogram1D> {
    check_aligned(outcomes, tests)?;
    let r = space
        .ranges()
        .get(axis)
        .ok_or_else(|| Error::InvalidInput(format!("axis {axis} out of range")))?;
    if bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    let mut h = Histogram1D {
        axis,
        edges: edges(r.min, r.max, bins),
        tested: vec![0; bins],
        retained: vec![0; bins],
    };
    for (u, o) in tests.iter().zip(outcomes) {
        let b = bin_of(u.values()[axis], r.min, r.max, bins);
        h.tested[b] += 1;
        if !o.reject {
            h.retained[b] += 1;
        }
    }
    Ok(h)
}

fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|b| lo + (hi - lo) * b as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub axes: (usize, usize),
    pub edges_i: Vec<f64>,
    pub edges_j: Vec<f64>,
    /// `[bin_i][bin_j]` counts.
    pub tested: Vec<Vec<usize>>,
    pub retained: Vec<Vec<usize>>,
}

impl Projection2D {
    /// Fraction retained per bin, `None` where no parameter was tested.
    pub fn proportion(&self, bi: usize, bj: usize) -> Option<f64> {
        let t = self.tested[bi][bj];
        (t > 0).then(|| self.retained[bi][bj] as f64 / t as f64)
    }

    /// Rows are bins of the first axis, columns bins of the second. Empty bins
    /// are written as `NA`.
    pub fn write_csv(&self, path: &Path, space: &ParameterSpace) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = BufWriter::new(f);
        let names = space.ranges();
        let io = |e| Error::io(path, e);
        writeln!(buf, "# rows={} edges={}", names[self.axes.0].name, join(&self.edges_i)).map_err(io)?;
        writeln!(buf, "# cols={} edges={}", names[self.axes.1].name, join(&self.edges_j)).map_err(io)?;
        for bi in 0..self.tested.len() {
            let row: Vec<String> = (0..self.tested[bi].len())
                .map(|bj| self.proportion(bi, bj).map(fmt_f64).unwrap_or_else(|| "NA".into()))
                .collect();
            writeln!(buf, "{}", row.join(",")).map_err(io)?;
        }
        buf.flush().map_err(io)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

pub fn project_2d(
    space: &ParameterSpace,
    tests: &[ParameterVector],
    outcomes: &[TestOutcome],
    axes: (usize, usize),
    bins: (usize, usize),
) -> Result<Projection2D> {
    check_aligned(outcomes, tests)?;
    let (i, j) = axes;
    let ranges = space.ranges();
    if i >= ranges.len() || j >= ranges.len() || i == j {
        return Err(Error::InvalidInput(format!("invalid axis pair ({i}, {j})")));
    }
    if bins.0 == 0 || bins.1 == 0 {
        return Err(Error::InvalidInput("need at least one bin per axis".into()));
    }
    let (ri, rj) = (&ranges[i], &ranges[j]);
    let mut tested = vec![vec![0; bins.1]; bins.0];
    let mut retained = vec![vec![0; bins.1]; bins.0];
    for (u, o) in tests.iter().zip(outcomes) {
        let bi = bin_of(u.values()[i], ri.min, ri.max, bins.0);
        let bj = bin_of(u.values()[j], rj.min, rj.max, bins.1);
        tested[bi][bj] += 1;
        if !o.reject {
            retained[bi][bj] += 1;
        }
    }
    Ok(Projection2D {
        axes,
        edges_i: edges(ri.min, ri.max, bins.0),
        edges_j: edges(rj.min, rj.max, bins.1),
        tested,
        retained,
    })
}

/// Whether the retained set rules out either end of an axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisConstraint {
    pub axis: usize,
    pub name: String,
    pub retained_min: Option<f64>,
    pub retained_max: Option<f64>,
    /// The lowest occupied bin has no retained parameter.
    pub lower: bool,
    /// The highest occupied bin has no retained parameter.
    pub upper: bool,
}

pub fn axis_constraints(
    space: &ParameterSpace,
    tests: &[ParameterVector],
    outcomes: &[TestOutcome],
    bins: usize,
) -> Result<Vec<AxisConstraint>> {
    (0..space.dim())
        .map(|axis| {
            let h = histogram_1d(space, tests, outcomes, axis, bins)?;
            let occupied: Vec<usize> = (0..bins).filter(|&b| h.tested[b] > 0).collect();
            let kept = tests
                .iter()
                .zip(outcomes)
                .filter(|(_, o)| !o.reject)
                .map(|(u, _)| u.values()[axis]);
            let (mut lo, mut hi) = (None::<f64>, None::<f64>);
            for v in kept {
                lo = Some(lo.map_or(v, |l| l.min(v)));
                hi = Some(hi.map_or(v, |h| h.max(v)));
            }
            Ok(AxisConstraint {
                axis,
                name: space.ranges()[axis].name.clone(),
                retained_min: lo,
                retained_max: hi,
                lower: occupied.first().is_some_and(|&b| h.retained[b] == 0),
                upper: occupied.last().is_some_and(|&b| h.retained[b] == 0),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_test_parameters, SamplingStrategy};

    fn outcomes_for(tests: &[ParameterVector], rule: impl Fn(&[f64]) -> bool) -> Vec<TestOutcome> {
        tests
            .iter()
            .enumerate()
            .map(|(k, u)| TestOutcome {
                k,
                statistic: u.values().iter().sum(),
                critical: 1.0,
                reject: rule(u.values()),
                df: 10,
                level: 0.05,
            })
            .collect()
    }

    #[test]
    fn trivial_inversions() {
        let space = ParameterSpace::unit(2);
        let tests = sample_test_parameters(&space, 50, 1, SamplingStrategy::Uniform).unwrap();
        let all = invert(&outcomes_for(&tests, |_| true), &tests, "h").unwrap();
        assert!(all.is_empty());
        let none = invert(&outcomes_for(&tests, |_| false), &tests, "h").unwrap();
        assert_eq!(none.retained, tests);
        assert!(invert(&outcomes_for(&tests[1..], |_| false), &tests, "h").is_err());
    }

    #[test]
    fn single_bin_is_overall_fraction() {
        let space = ParameterSpace::unit(3);
        let tests = sample_test_parameters(&space, 200, 2, SamplingStrategy::Uniform).unwrap();
        let out = outcomes_for(&tests, |u| u[0] + u[2] > 1.2);
        let p = project_2d(&space, &tests, &out, (0, 2), (1, 1)).unwrap();
        let kept = out.iter().filter(|o| !o.reject).count() as f64;
        assert_eq!(p.proportion(0, 0), Some(kept / 200.0));
    }

    #[test]
    fn linear_response_matches_brute_force_counts() {
        let space = ParameterSpace::unit(3);
        let tests = sample_test_parameters(&space, 3000, 7, SamplingStrategy::LatinHypercube).unwrap();
        let out = outcomes_for(&tests, |u| 2.0 * u[0] - u[1] > 0.8);
        let p = project_2d(&space, &tests, &out, (0, 1), (20, 20)).unwrap();
        for bi in 0..20 {
            for bj in 0..20 {
                let (lo_i, hi_i) = (bi as f64 / 20.0, (bi + 1) as f64 / 20.0);
                let (lo_j, hi_j) = (bj as f64 / 20.0, (bj + 1) as f64 / 20.0);
                let inside =
                    |u: &[f64]| u[0] >= lo_i && (u[0] < hi_i || bi == 19) && u[1] >= lo_j && (u[1] < hi_j || bj == 19);
                let t = tests.iter().filter(|u| inside(u.values())).count();
                let r = tests
                    .iter()
                    .filter(|u| inside(u.values()) && 2.0 * u.values()[0] - u.values()[1] <= 0.8)
                    .count();
                assert_eq!(p.tested[bi][bj], t);
                assert_eq!(p.retained[bi][bj], r);
                if let Some(f) = p.proportion(bi, bj) {
                    assert!((0.0..=1.0).contains(&f));
                }
            }
        }
        let c = axis_constraints(&space, &tests, &out, 20).unwrap();
        assert!(c[0].upper && !c[0].lower);
        assert!(!c[1].upper && !c[1].lower);
        assert!(!c[2].upper && !c[2].lower);
    }

    #[test]
    fn marginals_of_2d_match_1d() {
        let space = ParameterSpace::unit(3);
        let tests = sample_test_parameters(&space, 1000, 3, SamplingStrategy::Uniform).unwrap();
        let out = outcomes_for(&tests, |u| u[0] * u[1] > 0.3);
        let p = project_2d(&space, &tests, &out, (0, 1), (7, 11)).unwrap();
        let h0 = histogram_1d(&space, &tests, &out, 0, 7).unwrap();
        let h1 = histogram_1d(&space, &tests, &out, 1, 11).unwrap();
        for bi in 0..7 {
            assert_eq!(p.tested[bi].iter().sum::<usize>(), h0.tested[bi]);
            assert_eq!(p.retained[bi].iter().sum::<usize>(), h0.retained[bi]);
        }
        for bj in 0..11 {
            assert_eq!((0..7).map(|bi| p.tested[bi][bj]).sum::<usize>(), h1.tested[bj]);
            assert_eq!((0..7).map(|bi| p.retained[bi][bj]).sum::<usize>(), h1.retained[bj]);
        }
    }

    #[test]
    fn empty_bins_differ_from_zero_bins() {
        let space = ParameterSpace::unit(2);
        let tests = vec![ParameterVector::new_unchecked(vec![0.1, 0.1])];
        let out = outcomes_for(&tests, |_| true);
        let p = project_2d(&space, &tests, &out, (0, 1), (2, 2)).unwrap();
        assert_eq!(p.proportion(0, 0), Some(0.0));
        assert_eq!(p.proportion(1, 1), None);
    }

    #[test]
    fn scatter_is_sorted_by_coordinate() {
        let space = ParameterSpace::unit(2);
        let tests = sample_test_parameters(&space, 40, 5, SamplingStrategy::Uniform).unwrap();
        let out = outcomes_for(&tests, |u| u[1] > 0.5);
        let pts = project_1d(&tests, &out, 1).unwrap();
        assert!(pts.windows(2).all(|w| w[0].coordinate <= w[1].coordinate));
        assert!(pts.iter().all(|p| p.reject == (p.coordinate > 0.5)));
        assert!(project_1d(&tests, &out, 2).is_err());
    }
}
