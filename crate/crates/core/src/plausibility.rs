//! The implausibility statistic and its square-root chi-square test.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::residuals::{compensated_sum, Alignment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub k: usize,
    pub statistic: f64,
    pub critical: f64,
    pub reject: bool,
    pub df: usize,
    pub level: f64,
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("level {level} outside (0, 1)")))
    }
}

/// Root sum of squared standardized residuals over the retained cells.
pub fn implausibility(align: &Alignment, k: usize, delta2: f64) -> Result<f64> {
    align.check_k(k)?;
    if !(delta2 >= 0.0) {
        return Err(Error::InvalidInput(format!("delta2 = {delta2} must be >= 0")));
    }
    let std = align.standardized(k, delta2)?;
    Ok(compensated_sum(std.iter().map(|s| s * s)).sqrt())
}

/// Square root of the `1 - level` chi-square quantile with `df` degrees of
/// freedom.
pub fn critical_value(df: usize, level: f64) -> Result<f64> {
    if df == 0 {
        return Err(Error::InvalidInput("chi-square needs df >= 1".into()));
    }
    check_level(level)?;
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(chi.inverse_cdf(1.0 - level).sqrt())
}

/// Tests every test parameter at the given level with `df = |M*|`.
pub fn test_all(align: &Alignment, delta2: f64, level: f64) -> Result<Vec<TestOutcome>> {
    let df = align.len();
    if df == 0 {
        return Err(Error::Domain("no cells remain after exclusions".into()));
    }
    let critical = critical_value(df, level)?;
    (0..align.n_tests())
        .into_par_iter()
        .map(|k| {
            let statistic = implausibility(align, k, delta2)?;
            Ok(TestOutcome {
                k,
                statistic,
                critical,
                reject: statistic > critical,
                df,
                level,
            })
        })
        .collect()
}

/// Writes `k,statistic,critical,reject`, preceded by `#` comment lines for
/// any tags (for instance the history-matching mode).
pub fn write_outcomes(path: &Path, outcomes: &[TestOutcome], tags: &[(&str, String)]) -> Result<()> {
    use std::io::Write;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(f);
    for (k, v) in tags {
        writeln!(buf, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["k", "statistic", "critical", "reject"])?;
    for o in outcomes {
        w.write_record([
            o.k.to_string(),
            fmt_f64(o.statistic),
            fmt_f64(o.critical),
            o.reject.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads outcomes written by [`write_outcomes`]. `df` and `level` are not
/// stored per row and are filled from the arguments.
pub fn read_outcomes(path: &Path, df: usize, level: f64) -> Result<Vec<TestOutcome>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(std::io::BufReader::new(f));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| {
            rec.get(i)
                .ok_or_else(|| Error::Schema(format!("{}: short row", path.display())))
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Schema(format!("bad number '{s}'")));
        out.push(TestOutcome {
            k: get(0)?.parse().map_err(|_| Error::Schema("bad k".into()))?,
            statistic: num(get(1)?)?,
            critical: num(get(2)?)?,
            reject: get(3)?.parse().map_err(|_| Error::Schema("bad reject flag".into()))?,
            df,
            level,
        });
    }
    Ok(out)
}
