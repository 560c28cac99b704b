use nalgebra::{Cholesky, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lbfgsb::{minimize_box, BoxOptConfig};
use super::likelihood::LmlWorkspace;
use super::{scaled_distance, Hyperparameters};
use crate::data::ParameterVector;
use crate::error::{Error, Result};

pub const EMULATOR_FORMAT_VERSION: u32 = 1;

/// Lower bound on the nugget.
pub const NUGGET_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub max_evals: usize,
    pub pgtol: f64,
    pub ftol: f64,
    /// Per-parameter ranges used to bound the length scales. Defaults to the
    /// span of the training inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranges: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        let opt = BoxOptConfig::default();
        FitConfig {
            restarts: 5,
            seed: 0,
            max_iters: opt.max_iters,
            max_evals: opt.max_evals,
            pgtol: opt.pgtol,
            ftol: opt.ftol,
            ranges: None,
        }
    }
}

impl FitConfig {
    fn optimizer(&self) -> BoxOptConfig {
        BoxOptConfig {
            max_iters: self.max_iters,
            max_evals: self.max_evals,
            pgtol: self.pgtol,
            ftol: self.ftol,
            ..BoxOptConfig::default()
        }
    }
}

/// A fitted per-cell emulator. Immutable once built.
#[derive(Debug, Clone)]
pub struct CellEmulator {
    hyper: Hyperparameters,
    inputs: Vec<ParameterVector>,
    outputs: Vec<f64>,
    log_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct EmulatorRecord {
    version: u32,
    hyper: Hyperparameters,
    log_likelihood: f64,
    inputs: Vec<ParameterVector>,
    outputs: Vec<f64>,
}

impl Serialize for CellEmulator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EmulatorRecord {
            version: EMULATOR_FORMAT_VERSION,
            hyper: self.hyper.clone(),
            log_likelihood: self.log_likelihood,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CellEmulator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = EmulatorRecord::deserialize(d)?;
        if rec.version != EMULATOR_FORMAT_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported emulator format version {}",
                rec.version
            )));
        }
        let mut emu =
            CellEmulator::from_hyperparameters(rec.hyper, rec.inputs, rec.outputs).map_err(serde::de::Error::custom)?;
        emu.log_likelihood = rec.log_likelihood;
        Ok(emu)
    }
}

impl CellEmulator {
    /// Conditions a GP with fixed hyperparameters on the training data.
    pub fn from_hyperparameters(
        hyper: Hyperparameters,
        inputs: Vec<ParameterVector>,
        outputs: Vec<f64>,
    ) -> Result<Self> {
        if inputs.len() < 2 {
            return Err(Error::InvalidInput(
                "an emulator needs at least 2 training points".into(),
            ));
        }
        hyper.validate()?;
        let ws = LmlWorkspace::new(&inputs, &outputs)?;
        let f = ws.factorize(&hyper)?;
        let (lml, _) = ws.evaluate(&hyper)?;
        Ok(CellEmulator {
            hyper,
            inputs,
            outputs,
            log_likelihood: lml,
            chol: f.chol,
            alpha: f.alpha,
        })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn inputs(&self) -> &[ParameterVector] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Largest possible predictive variance, reached far from the design.
    pub fn prior_variance(&self) -> f64 {
        self.hyper.amplitude2 + self.hyper.nugget
    }

    /// Predictive mean and variance at `u`.
    pub fn predict(&self, u: &ParameterVector) -> (f64, f64) {
        let h = &self.hyper;
        let n = self.inputs.len();
        let mut kstar = DVector::zeros(n);
        for (i, x) in self.inputs.iter().enumerate() {
            kstar[i] = h.amplitude2 * (-scaled_distance(u.values(), x.values(), &h.length_scales)).exp();
        }
        let mean = h.beta0 + kstar.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .expect("cholesky factor has a positive diagonal");
        let var = (self.prior_variance() - v.norm_squared()).clamp(0.0, self.prior_variance());
        (mean, var)
    }
}

fn mean_and_variance(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn bounds(inputs: &[ParameterVector], outputs: &[f64], cfg: &FitConfig) -> Result<(Bounds, f64, f64)> {
    let p = inputs[0].dim();
    let ranges: Vec<f64> = match &cfg.ranges {
        Some(r) if r.len() == p => r.clone(),
        Some(r) => {
            return Err(Error::InvalidInput(format!("{} ranges for {p} parameters", r.len())));
        }
        None => (0..p)
            .map(|k| {
                let (lo, hi) = inputs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), u| {
                    (a.min(u.values()[k]), b.max(u.values()[k]))
                });
                if hi > lo {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect(),
    };
    let (mean, var) = mean_and_variance(outputs);
    let var_eff = var.max(1e-12);
    let ymin = outputs.iter().copied().fold(f64::INFINITY, f64::min);
    let ymax = outputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (ymax - ymin).max(var_eff.sqrt()).max(1e-8);

    let mut lo = vec![ymin - 10.0 * span, (1e-8 * var_eff).ln()];
    let mut hi = vec![ymax + 10.0 * span, (1e4 * var_eff).ln()];
    for r in &ranges {
        lo.push((1e-2 * r).ln());
        hi.push((1e2 * r).ln());
    }
    lo.push(NUGGET_FLOOR.ln());
    hi.push(var_eff.max(10.0 * NUGGET_FLOOR).ln());
    Ok((Bounds { lo, hi }, mean, var_eff))
}

/// Fits the emulator by maximising the log marginal likelihood over
/// `(beta0, amplitude2, length scales, nugget)` from several starting points.
pub fn fit(inputs: &[ParameterVector], outputs: &[f64], cfg: &FitConfig) -> Result<CellEmulator> {
    if inputs.len() < 2 {
        return Err(Error::InvalidInput("fit needs at least 2 training points".into()));
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("training outputs must be finite".into()));
    }
    let ws = LmlWorkspace::new(inputs, outputs)?;
    let (b, mean, var) = bounds(inputs, outputs, cfg)?;
    let dim = b.lo.len();
    let p = dim - 3;
    let nug = dim - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let objective = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let h = Hyperparameters::from_log_params(theta);
        ws.evaluate(&h)
            .ok()
            .map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect()))
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut failures = Vec::new();
    for restart in 0..cfg.restarts.max(1) {
        let mut start = vec![0.0; dim];
        start[0] = mean;
        if restart == 0 {
            start[1] = var.ln();
            for k in 0..p {
                start[2 + k] = 0.5 * (b.lo[2 + k] + b.hi[2 + k]);
            }
            start[nug] = (1e-6 * var).max(NUGGET_FLOOR).ln();
        } else {
            for i in 1..dim {
                start[i] = b.lo[i] + rng.random::<f64>() * (b.hi[i] - b.lo[i]);
            }
        }
        for i in 0..dim {
            start[i] = start[i].clamp(b.lo[i], b.hi[i]);
        }
        // raise the nugget until the starting Gram matrix factorizes
        while objective(&start).is_none() && start[nug] < b.hi[nug] {
            start[nug] = (start[nug] + 10f64.ln()).min(b.hi[nug]);
        }
        match minimize_box(objective, &start, &b.lo, &b.hi, &cfg.optimizer()) {
            Ok(r) => {
                if best.as_ref().is_none_or(|(v, _)| r.value < *v) {
                    best = Some((r.value, r.x));
                }
            }
            Err(e) => failures.push(format!("restart {restart}: {e}")),
        }
    }
    let Some((_, theta)) = best else {
        return Err(Error::Fit(failures.join("; ")));
    };
    CellEmulator::from_hyperparameters(
        Hyperparameters::from_log_params(&theta),
        inputs.to_vec(),
        outputs.to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal};

    fn pv(v: Vec<f64>) -> ParameterVector {
        ParameterVector::new_unchecked(v)
    }

    /// Conditional mean and variance by explicit dense solves.
    fn dense_predict(h: &Hyperparameters, x: &[ParameterVector], y: &[f64], u: &ParameterVector) -> (f64, f64) {
        let n = x.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(x[i].values(), x[j].values(), h).unwrap() + if i == j { h.nugget } else { 0.0 }
        });
        let ks = DVector::from_fn(n, |i, _| kernel(u.values(), x[i].values(), h).unwrap());
        let r = DVector::from_iterator(n, y.iter().map(|v| v - h.beta0));
        let lu = k.lu();
        let w = lu.solve(&r).unwrap();
        let z = lu.solve(&ks).unwrap();
        (h.beta0 + ks.dot(&w), h.amplitude2 + h.nugget - ks.dot(&z))
    }

    #[test]
    fn three_point_prediction_matches_dense_solve() {
        let x = vec![pv(vec![0.0, 0.0]), pv(vec![0.5, 1.0]), pv(vec![1.0, 0.2])];
        let y = vec![0.1, 0.4, -0.2];
        let h = Hyperparameters {
            beta0: 0.05,
            amplitude2: 0.3,
            length_scales: vec![0.7, 1.3],
            nugget: 1e-4,
        };
        let emu = CellEmulator::from_hyperparameters(h.clone(), x.clone(), y.clone()).unwrap();
        for u in [pv(vec![0.2, 0.3]), pv(vec![0.9, 0.9]), pv(vec![-1.0, 2.0])] {
            let (m, v) = emu.predict(&u);
            let (md, vd) = dense_predict(&h, &x, &y, &u);
            assert!((m - md).abs() <= 1e-12 * md.abs().max(1e-3), "{m} {md}");
            assert!((v - vd).abs() <= 1e-12 * vd.abs().max(1e-3), "{v} {vd}");
        }
    }

    #[test]
    fn interpolates_training_points_with_tiny_nugget() {
        let x = vec![pv(vec![0.0]), pv(vec![0.4]), pv(vec![1.0])];
        let y = vec![1.0, 2.0, 0.5];
        let h = Hyperparameters {
            beta0: 1.0,
            amplitude2: 1.0,
            length_scales: vec![0.5],
            nugget: 1e-12,
        };
        let emu = CellEmulator::from_hyperparameters(h, x.clone(), y.clone()).unwrap();
        for (u, t) in x.iter().zip(&y) {
            let (m, v) = emu.predict(u);
            assert!((m - t).abs() < 1e-9);
            assert!(v < 1e-9);
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let x = vec![pv(vec![0.0, 0.0]), pv(vec![1.0, 1.0])];
        let h = Hyperparameters {
            beta0: 0.7,
            amplitude2: 2.0,
            length_scales: vec![0.1, 0.1],
            nugget: 1e-3,
        };
        let emu = CellEmulator::from_hyperparameters(h, x, vec![3.0, -1.0]).unwrap();
        let (m, v) = emu.predict(&pv(vec![50.0, -50.0]));
        assert!((m - 0.7).abs() < 1e-12);
        assert!((v - 2.001).abs() < 1e-12);
    }

    #[test]
    fn constant_outputs_fit_to_a_flat_emulator() {
        let x: Vec<_> = (0..8)
            .map(|i| pv(vec![i as f64 / 7.0, (i * 3 % 8) as f64 / 7.0]))
            .collect();
        let y = vec![0.25; 8];
        let emu = fit(&x, &y, &FitConfig::default()).unwrap();
        let h = emu.hyperparameters();
        assert!(h.amplitude2 < 1e-6, "amplitude2 {}", h.amplitude2);
        for u in [pv(vec![0.33, 0.1]), pv(vec![0.9, 0.6])] {
            assert!((emu.predict(&u).0 - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_is_deterministic_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<_> = (0..15).map(|_| pv(vec![rng.random(), rng.random()])).collect();
        let y: Vec<f64> = x.iter().map(|u| (3.0 * u.values()[0]).sin() + u.values()[1]).collect();
        let cfg = FitConfig {
            restarts: 2,
            seed: 4,
            ..Default::default()
        };
        let a = fit(&x, &y, &cfg).unwrap();
        let b = fit(&x, &y, &cfg).unwrap();
        assert_eq!(a.hyperparameters(), b.hyperparameters());
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(fit(&[pv(vec![0.0])], &[1.0], &FitConfig::default()).is_err());
        assert!(fit(&[pv(vec![0.0]), pv(vec![1.0])], &[1.0, f64::NAN], &FitConfig::default()).is_err());
    }

    #[test]
    fn fit_is_invariant_to_training_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<_> = (0..20).map(|_| pv(vec![rng.random(), rng.random()])).collect();
        let y: Vec<f64> = x.iter().map(|u| (2.0 * u.values()[0]).cos() * u.values()[1]).collect();
        let cfg = FitConfig {
            restarts: 3,
            ..Default::default()
        };
        let a = fit(&x, &y, &cfg).unwrap();
        let mut idx: Vec<usize> = (0..20).collect();
        idx.reverse();
        idx.swap(3, 11);
        let xp: Vec<_> = idx.iter().map(|&i| x[i].clone()).collect();
        let yp: Vec<_> = idx.iter().map(|&i| y[i]).collect();
        let b = fit(&xp, &yp, &cfg).unwrap();
        assert!((a.log_likelihood() - b.log_likelihood()).abs() < 1e-3 * a.log_likelihood().abs().max(1.0));
    }

    #[test]
    fn serialization_round_trip() {
        let x = vec![pv(vec![0.0]), pv(vec![0.4]), pv(vec![1.0])];
        let emu = fit(&x, &[0.1, 0.5, 0.2], &FitConfig::default()).unwrap();
        let json = serde_json::to_string(&emu).unwrap();
        let back: CellEmulator = serde_json::from_str(&json).unwrap();
        assert_eq!(back.hyperparameters(), emu.hyperparameters());
        assert_eq!(back.predict(&pv(vec![0.7])), emu.predict(&pv(vec![0.7])));
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        let bumped = json.replace("\"version\":1", "\"version\":99");
        assert!(serde_json::from_str::<CellEmulator>(&bumped).is_err());
    }

    /// Draws a sample path of a zero-mean GP with the given hyperparameters.
    fn sample_gp(h: &Hyperparameters, x: &[ParameterVector], seed: u64) -> Vec<f64> {
        let n = x.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(x[i].values(), x[j].values(), h).unwrap() + if i == j { 1e-10 } else { 0.0 }
        });
        let l = k.cholesky().unwrap().unpack();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        (l * z).iter().map(|v| v + h.beta0).collect()
    }

    #[test]
    fn recovers_known_length_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<_> = (0..200)
            .map(|_| pv(vec![rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0]))
            .collect();
        let truth = Hyperparameters {
            beta0: 0.0,
            amplitude2: 1.0,
            length_scales: vec![1.0, 5.0],
            nugget: 0.0,
        };
        let y = sample_gp(&truth, &x, 5);
        let cfg = FitConfig {
            restarts: 3,
            ranges: Some(vec![10.0, 10.0]),
            ..Default::default()
        };
        let emu = fit(&x, &y, &cfg).unwrap();
        let ls = &emu.hyperparameters().length_scales;
        for (est, t) in ls.iter().zip(&truth.length_scales) {
            assert!(est / t < 3.0 && t / est < 3.0, "fitted {ls:?}");
        }
    }
}
