use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::Hyperparameters;
use crate::data::ParameterVector;
use crate::error::{Error, Result};

/// Pairwise squared coordinate differences of a training design, reused across
/// likelihood evaluations during fitting.
#[derive(Debug, Clone)]
pub struct LmlWorkspace {
    n: usize,
    p: usize,
    /// `sq[k][i * n + j] = (x_ik - x_jk)^2`, upper triangle only (i < j).
    sq: Vec<Vec<f64>>,
    outputs: DVector<f64>,
}

pub(crate) struct Factorized {
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
}

impl LmlWorkspace {
    pub fn new(inputs: &[ParameterVector], outputs: &[f64]) -> Result<Self> {
        let n = inputs.len();
        if n != outputs.len() {
            return Err(Error::InvalidInput("inputs and outputs differ in length".into()));
        }
        if n == 0 {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let p = inputs[0].dim();
        if inputs.iter().any(|u| u.dim() != p) {
            return Err(Error::InvalidInput("training inputs differ in dimension".into()));
        }
        let mut sq = vec![vec![0.0; n * n]; p];
        for i in 0..n {
            let xi = inputs[i].values();
            for j in i + 1..n {
                let xj = inputs[j].values();
                for k in 0..p {
                    let d = xi[k] - xj[k];
                    sq[k][i * n + j] = d * d;
                }
            }
        }
        Ok(LmlWorkspace {
            n,
            p,
            sq,
            outputs: DVector::from_column_slice(outputs),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Correlation matrix `exp(-d_ij)` and the scaled distances, upper triangle.
    fn correlations(&self, length_scales: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let inv_l2: Vec<f64> = length_scales.iter().map(|l| 1.0 / (l * l)).collect();
        let mut dist = vec![0.0; n * n];
        for (k, sqk) in self.sq.iter().enumerate() {
            let w = inv_l2[k];
            for i in 0..n {
                let row = i * n;
                for j in i + 1..n {
                    dist[row + j] += sqk[row + j] * w;
                }
            }
        }
        let mut corr = vec![0.0; n * n];
        for i in 0..n {
            corr[i * n + i] = 1.0;
            for j in i + 1..n {
                let d = dist[i * n + j].sqrt();
                dist[i * n + j] = d;
                corr[i * n + j] = (-d).exp();
            }
        }
        (corr, dist)
    }

    pub(crate) fn gram(&self, hyper: &Hyperparameters) -> DMatrix<f64> {
        let n = self.n;
        let (corr, _) = self.correlations(&hyper.length_scales);
        gram_from_corr(n, &corr, hyper)
    }

    pub(crate) fn factorize(&self, hyper: &Hyperparameters) -> Result<Factorized> {
        let k = self.gram(hyper);
        let chol = Cholesky::new(k).ok_or(Error::NotPositiveDefinite)?;
        let resid = self.outputs.add_scalar(-hyper.beta0);
        let alpha = chol.solve(&resid);
        Ok(Factorized { chol, alpha })
    }

    /// Log marginal likelihood and its gradient with respect to
    /// `[beta0, ln amplitude2, ln l_1 .. ln l_p, ln nugget]`.
    pub fn evaluate(&self, hyper: &Hyperparameters) -> Result<(f64, Vec<f64>)> {
        hyper.validate()?;
        if hyper.dim() != self.p {
            return Err(Error::Domain(format!(
                "{} length scales for {}-dimensional inputs",
                hyper.dim(),
                self.p
            )));
        }
        let n = self.n;
        let (corr, dist) = self.correlations(&hyper.length_scales);
        let k = gram_from_corr(n, &corr, hyper);
        let chol = Cholesky::new(k).ok_or(Error::NotPositiveDefinite)?;
        let resid = self.outputs.add_scalar(-hyper.beta0);
        let alpha = chol.solve(&resid);

        let l = chol.l_dirty();
        let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let quad = resid.dot(&alpha);
        let value = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();
        if !value.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }

        // W = alpha alpha^T - K^{-1};  d lml / d theta = 1/2 tr(W dK/dtheta)
        let kinv = chol.inverse();
        let a = hyper.amplitude2;
        let mut grad = vec![0.0; self.p + 3];
        grad[0] = alpha.sum();

        let mut g_amp = 0.0;
        let mut g_len = vec![0.0; self.p];
        let inv_l2: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
        let mut trace_w = 0.0;
        for i in 0..n {
            let wii = alpha[i] * alpha[i] - kinv[(i, i)];
            trace_w += wii;
            g_amp += 0.5 * wii * a;
            for j in i + 1..n {
                let idx = i * n + j;
                // off-diagonal pairs appear twice in the trace
                let wij = alpha[i] * alpha[j] - kinv[(i, j)];
                let dk_amp = a * corr[idx];
                g_amp += wij * dk_amp;
                let d = dist[idx];
                if d > 0.0 {
                    let scale = wij * dk_amp / d;
                    for (k, gk) in g_len.iter_mut().enumerate() {
                        *gk += scale * self.sq[k][idx] * inv_l2[k];
                    }
                }
            }
        }
        grad[1] = g_amp;
        grad[2..2 + self.p].copy_from_slice(&g_len);
        grad[2 + self.p] = 0.5 * hyper.nugget * trace_w;
        Ok((value, grad))
    }
}

fn gram_from_corr(n: usize, corr: &[f64], hyper: &Hyperparameters) -> DMatrix<f64> {
    let a = hyper.amplitude2;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = a + hyper.nugget;
        for j in i + 1..n {
            let v = a * corr[i * n + j];
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Gaussian log marginal likelihood of `outputs - beta0` under the kernel Gram
/// matrix plus nugget, with its gradient in log-hyperparameter coordinates.
pub fn log_marginal_likelihood(
    hyper: &Hyperparameters,
    inputs: &[ParameterVector],
    outputs: &[f64],
) -> Result<(f64, Vec<f64>)> {
    LmlWorkspace::new(inputs, outputs)?.evaluate(hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n: usize, p: usize) -> (Vec<ParameterVector>, Vec<f64>, Hyperparameters) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ParameterVector> = (0..n)
            .map(|_| ParameterVector::new_unchecked((0..p).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let outputs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let hyper = Hyperparameters {
            beta0: rng.random::<f64>() - 0.5,
            amplitude2: 0.5 + rng.random::<f64>(),
            length_scales: (0..p).map(|_| 0.2 + rng.random::<f64>()).collect(),
            nugget: 1e-3 + 1e-2 * rng.random::<f64>(),
        };
        (inputs, outputs, hyper)
    }

    /// Dense evaluation of the log marginal likelihood straight from the kernel.
    fn dense_lml(h: &Hyperparameters, x: &[ParameterVector], y: &[f64]) -> f64 {
        let n = x.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(x[i].values(), x[j].values(), h).unwrap() + if i == j { h.nugget } else { 0.0 }
        });
        let r = DVector::from_iterator(n, y.iter().map(|v| v - h.beta0));
        let lu = k.clone().lu();
        let sol = lu.solve(&r).unwrap();
        -0.5 * r.dot(&sol) - 0.5 * k.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn value_matches_dense_formula() {
        for seed in 0..5 {
            let (x, y, h) = random_problem(seed, 6, 2);
            let (v, _) = log_marginal_likelihood(&h, &x, &y).unwrap();
            assert!((v - dense_lml(&h, &x, &y)).abs() < 1e-10 * v.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_central_differences_on_five_points() {
        for seed in 0..10 {
            let (x, y, h) = random_problem(100 + seed, 5, 3);
            let (_, grad) = log_marginal_likelihood(&h, &x, &y).unwrap();
            let theta = h.to_log_params();
            let step = 1e-6;
            for i in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += step;
                tm[i] -= step;
                let fp = log_marginal_likelihood(&Hyperparameters::from_log_params(&tp), &x, &y)
                    .unwrap()
                    .0;
                let fm = log_marginal_likelihood(&Hyperparameters::from_log_params(&tm), &x, &y)
                    .unwrap()
                    .0;
                let fd = (fp - fm) / (2.0 * step);
                let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-3);
                assert!(rel < 1e-5, "seed {seed} coord {i}: fd {fd} analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn identical_outputs_at_mean_level() {
        let x = vec![
            ParameterVector::new_unchecked(vec![0.0]),
            ParameterVector::new_unchecked(vec![1.0]),
        ];
        let y = [0.4, 0.4];
        let h = Hyperparameters {
            beta0: 0.4,
            amplitude2: 1.0,
            length_scales: vec![1.0],
            nugget: 1e-9,
        };
        let (v0, g) = log_marginal_likelihood(&h, &x, &y).unwrap();
        assert!(g[0].abs() < 1e-9);
        for shift in [-0.1, 0.05, 0.3] {
            let hs = Hyperparameters {
                beta0: 0.4 + shift,
                ..h.clone()
            };
            assert!(log_marginal_likelihood(&hs, &x, &y).unwrap().0 < v0);
        }
    }

    #[test]
    fn quadratic_term_scales_with_square_of_deviation() {
        let (x, y, h) = random_problem(7, 8, 2);
        let ws = LmlWorkspace::new(&x, &y).unwrap();
        let f = ws.factorize(&h).unwrap();
        let r = DVector::from_iterator(y.len(), y.iter().map(|v| v - h.beta0));
        let quad = r.dot(&f.alpha);
        let c = 3.5;
        let y2: Vec<f64> = y.iter().map(|v| h.beta0 + c * (v - h.beta0)).collect();
        let f2 = LmlWorkspace::new(&x, &y2).unwrap().factorize(&h).unwrap();
        let r2 = DVector::from_iterator(y.len(), y2.iter().map(|v| v - h.beta0));
        let quad2 = r2.dot(&f2.alpha);
        assert!((quad2 - c * c * quad).abs() < 1e-10 * quad2.abs());
    }

    #[test]
    fn duplicate_inputs_without_nugget_fail() {
        let x = vec![
            ParameterVector::new_unchecked(vec![0.5]),
            ParameterVector::new_unchecked(vec![0.5]),
        ];
        let h = Hyperparameters {
            beta0: 0.0,
            amplitude2: 1.0,
            length_scales: vec![1.0],
            nugget: 0.0,
        };
        assert!(matches!(
            log_marginal_likelihood(&h, &x, &[0.1, 0.2]),
            Err(Error::NotPositiveDefinite)
        ));
    }

    proptest! {
        #[test]
        fn gram_is_positive_semidefinite(
            seed in any::<u64>(),
            n in 2usize..12,
            p in 1usize..5,
            log_a in -3.0f64..3.0,
            log_l in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let (x, y, _) = random_problem(seed, n, p);
            let h = Hyperparameters {
                beta0: 0.0,
                amplitude2: log_a.exp(),
                length_scales: log_l[..p].iter().map(|v| v.exp()).collect(),
                nugget: 0.0,
            };
            let ws = LmlWorkspace::new(&x, &y).unwrap();
            let k = ws.gram(&h);
            prop_assert!((&k - k.transpose()).abs().max() == 0.0);
            let eig = k.symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-10 * h.amplitude2 * n as f64);
        }

        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>()) {
            let (x, y, h) = random_problem(seed, 6, 2);
            let (_, grad) = log_marginal_likelihood(&h, &x, &y).unwrap();
            let theta = h.to_log_params();
            for i in 0..theta.len() {
                let step = 1e-6;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += step;
                tm[i] -= step;
                let fp = log_marginal_likelihood(&Hyperparameters::from_log_params(&tp), &x, &y).unwrap().0;
                let fm = log_marginal_likelihood(&Hyperparameters::from_log_params(&tm), &x, &y).unwrap().0;
                let fd = (fp - fm) / (2.0 * step);
                prop_assert!((fd - grad[i]).abs() / grad[i].abs().max(1e-3) < 1e-4);
            }
        }
    }
}
