//! History-matching style tests: an order statistic of the per-cell absolute
//! standardized residuals, with a Monte Carlo critical value from samples of
//! independent half-normals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet::splitmix64;
use crate::plausibility::{check_level, TestOutcome};
use crate::residuals::Alignment;

const MC_BATCH: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HmMode {
    /// Lower empirical `q` quantile of the sorted set; `q = 1` is the maximum.
    Quantile(f64),
    /// The `N`th largest element.
    OrderStatistic(usize),
}

impl HmMode {
    /// Zero-based index into the ascending sort of `m` values.
    pub fn index(&self, m: usize) -> Result<usize> {
        if m == 0 {
            return Err(Error::Domain("no cells remain after exclusions".into()));
        }
        match *self {
            HmMode::Quantile(q) if q > 0.0 && q <= 1.0 => Ok(((q * m as f64).ceil() as usize).clamp(1, m) - 1),
            HmMode::Quantile(q) => Err(Error::InvalidInput(format!("q = {q} outside (0, 1]"))),
            HmMode::OrderStatistic(n) if n >= 1 && n <= m => Ok(m - n),
            HmMode::OrderStatistic(n) => Err(Error::InvalidInput(format!("N = {n} outside [1, {m}]"))),
        }
    }

    pub fn tag(&self) -> (&'static str, String) {
        match self {
            HmMode::Quantile(q) => ("q", q.to_string()),
            HmMode::OrderStatistic(n) => ("N", n.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HMConfig {
    pub mode: HmMode,
    pub level: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for HMConfig {
    fn default() -> Self {
        HMConfig {
            mode: HmMode::Quantile(0.75),
            level: 0.05,
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

impl HMConfig {
    pub fn validate(&self) -> Result<()> {
        check_level(self.level)?;
        if self.mc_samples < 1000 {
            return Err(Error::InvalidInput("mc_samples must be at least 1000".into()));
        }
        Ok(())
    }
}

/// The selected order statistic of `values`; the slice is reordered.
pub fn order_statistic(values: &mut [f64], mode: HmMode) -> Result<f64> {
    let i = mode.index(values.len())?;
    let (_, v, _) = values.select_nth_unstable_by(i, f64::total_cmp);
    Ok(*v)
}

pub fn hm_statistic(align: &Alignment, k: usize, delta2: f64, mode: HmMode) -> Result<f64> {
    align.check_k(k)?;
    let mut s = align.standardized(k, delta2)?;
    order_statistic(&mut s, mode)
}

/// The `1 - level` quantile of the statistic over `mc_samples` draws of `m`
/// standard half-normals.
pub fn hm_critical(m: usize, cfg: &HMConfig) -> Result<f64> {
    cfg.validate()?;
    cfg.mode.index(m)?;
    let batches = cfg.mc_samples.div_ceil(MC_BATCH);
    let per_batch: Vec<Vec<f64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(b as u64)));
            let size = MC_BATCH.min(cfg.mc_samples - b * MC_BATCH);
            let mut buf = vec![0.0; m];
            (0..size)
                .map(|_| {
                    for x in buf.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *x = z.abs();
                    }
                    order_statistic(&mut buf, cfg.mode).expect("index checked above")
                })
                .collect()
        })
        .collect();
    let mut all: Vec<f64> = per_batch.into_iter().flatten().collect();
    let p = 1.0 - cfg.level;
    let i = ((p * all.len() as f64).ceil() as usize).clamp(1, all.len()) - 1;
    let (_, v, _) = all.select_nth_unstable_by(i, f64::total_cmp);
    Ok(*v)
}

/// Tests every test parameter against the Monte Carlo critical value.
pub fn hm_test_all(align: &Alignment, delta2: f64, cfg: &HMConfig) -> Result<Vec<TestOutcome>> {
    let m = align.len();
    let critical = hm_critical(m, cfg)?;
    (0..align.n_tests())
        .into_par_iter()
        .map(|k| {
            let statistic = hm_statistic(align, k, delta2, cfg.mode)?;
            Ok(TestOutcome {
                k,
                statistic,
                critical,
                reject: statistic > critical,
                df: m,
                level: cfg.level,
            })
        })
        .collect()
}
