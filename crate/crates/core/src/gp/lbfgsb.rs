//! Limited-memory quasi-Newton minimisation on a box.
//!
//! Directions come from the usual two-loop recursion restricted to the free
//! variables; steps are projected back onto the box and accepted with a
//! backtracking Armijo search along the projected path.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxOptConfig {
    pub memory: usize,
    pub max_iters: usize,
    pub max_evals: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub pgtol: f64,
    /// Stop when the relative decrease of the objective falls below this.
    pub ftol: f64,
}

impl Default for BoxOptConfig {
    fn default() -> Self {
        BoxOptConfig {
            memory: 10,
            max_iters: 200,
            max_evals: 1000,
            pgtol: 1e-5,
            ftol: 1e7 * f64::EPSILON,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoxOptResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((xi, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *xi = xi.clamp(l, h);
    }
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| {
            if (xi <= l && gi > 0.0) || (xi >= h && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `f` over `[lo, hi]` starting from `x0`.
///
/// `f` returns `None` where the objective is undefined; such points are
/// treated as infinitely bad during the line search.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], cfg: &BoxOptConfig) -> Result<BoxOptResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let dim = x0.len();
    if lo.len() != dim || hi.len() != dim || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::Opt("inconsistent bounds".into()));
    }
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x).ok_or_else(|| Error::Opt("objective undefined at start".into()))?;
    let mut evals = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iters = 0;

    while iters < cfg.max_iters && evals < cfg.max_evals {
        iters += 1;
        let pg = projected_gradient(&x, &g, lo, hi);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < cfg.pgtol {
            converged = true;
            break;
        }
        let free: Vec<bool> = pg.iter().map(|v| *v != 0.0).collect();

        // two-loop recursion on the free subspace
        let mut d: Vec<f64> = pg.iter().map(|v| -v).collect();
        if !history.is_empty() {
            let masked =
                |v: &[f64]| -> Vec<f64> { v.iter().zip(&free).map(|(x, &f)| if f { *x } else { 0.0 }).collect() };
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, rho) in history.iter().rev() {
                let a = rho * dot(&masked(s), &d);
                for (di, yi) in d.iter_mut().zip(masked(y)) {
                    *di -= a * yi;
                }
                alphas.push(a);
            }
            let (s, y, _) = history.back().expect("nonempty");
            let gamma = dot(s, y) / dot(y, y);
            for di in &mut d {
                *di *= gamma;
            }
            for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
                let b = rho * dot(&masked(y), &d);
                for (di, si) in d.iter_mut().zip(masked(s)) {
                    *di += (a - b) * si;
                }
            }
            for (di, &fr) in d.iter_mut().zip(&free) {
                if !fr {
                    *di = 0.0;
                }
            }
            if dot(&d, &g) >= 0.0 {
                history.clear();
                d = pg.iter().map(|v| -v).collect();
            }
        }

        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = if history.is_empty() { (1.0 / dmax).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            if evals >= cfg.max_evals {
                break;
            }
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            project(&mut xn, lo, hi);
            let moved: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if moved.iter().all(|v| *v == 0.0) {
                break;
            }
            evals += 1;
            if let Some((fnew, gnew)) = f(&xn) {
                if fnew.is_finite() && fnew <= fx + 1e-4 * dot(&g, &moved) {
                    accepted = Some((xn, fnew, gnew, moved));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((xn, fnew, gnew, s)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if decrease <= cfg.ftol * fx.abs().max(fnew.abs()).max(1.0) {
            converged = true;
            break;
        }
    }

    Ok(BoxOptResult {
        x,
        value: fx,
        iterations: iters,
        evaluations: evals,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let cfg = BoxOptConfig {
            pgtol: 1e-8,
            ftol: 0.0,
            ..Default::default()
        };
        let r = minimize_box(rosenbrock, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &cfg).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r);
    }

    #[test]
    fn active_bound_is_respected() {
        // minimum of (x-3)^2 + (y+1)^2 on [0,2]x[0,2] is (2, 0)
        let f = |x: &[f64]| {
            Some((
                (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)],
            ))
        };
        let r = minimize_box(f, &[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0], &BoxOptConfig::default()).unwrap();
        assert_eq!(r.x, vec![2.0, 0.0]);
        assert!(r.converged);
    }

    #[test]
    fn undefined_region_is_avoided() {
        // objective undefined for x > 1.5, minimum at 1
        let f = |x: &[f64]| {
            if x[0] > 1.5 {
                None
            } else {
                Some(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
            }
        };
        let r = minimize_box(f, &[-4.0], &[-10.0], &[10.0], &BoxOptConfig::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4);
        assert!(minimize_box(f, &[3.0], &[-10.0], &[10.0], &BoxOptConfig::default()).is_err());
    }
}
