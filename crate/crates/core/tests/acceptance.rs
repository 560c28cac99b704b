//! End-to-end acceptance checks. Runs as a plain binary so each criterion
//! prints a single PASS/FAIL line; exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use strict_bounds::data::{sample_test_parameters, ParameterVector, SamplingStrategy, TrainingSet};
use strict_bounds::discrepancy::{estimate, log_likelihood, DiscrepancyConfig};
use strict_bounds::filter::{find_outliers, CellStatus};
use strict_bounds::fleet::{predict_fleet, train_fleet, FleetConfig};
use strict_bounds::gp::{kernel, CellEmulator, FitConfig, Hyperparameters, LmlWorkspace};
use strict_bounds::grid::MatchedGrid;
use strict_bounds::history::{hm_critical, hm_test_all, HMConfig, HmMode};
use strict_bounds::pipeline::{RunManifest, Runner, Summary};
use strict_bounds::plausibility::{critical_value, implausibility};
use strict_bounds::residuals::Alignment;
use strict_bounds::synthetic::{generate, oracle_predictions, SyntheticSpec};

type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn unit_tests(dim: usize, count: usize, seed: u64, truth: &[f64]) -> Vec<ParameterVector> {
    let space = strict_bounds::data::ParameterSpace::unit(dim);
    let mut t = sample_test_parameters(&space, count, seed, SamplingStrategy::Uniform).unwrap();
    t.push(ParameterVector::new_unchecked(truth.to_vec()));
    t
}

fn full_grid(spec: &SyntheticSpec) -> MatchedGrid {
    strict_bounds::grid::match_grids(&spec.sim_grid, &spec.sat_grid).unwrap()
}

// 1. emulator mean/variance against dense solves, likelihood gradient against
// central differences
fn gp_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_mean = 0f64;
    let mut worst_var = 0f64;
    let mut worst_grad = 0f64;
    for _ in 0..50 {
        let n = rng.random_range(5..=30);
        let p = rng.random_range(1..=5);
        let x: Vec<ParameterVector> = (0..n)
            .map(|_| ParameterVector::new_unchecked((0..p).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = rng.random_range(0.1..2.0);
        let h = Hyperparameters {
            beta0: rng.random_range(-1.0..1.0),
            amplitude2: a,
            length_scales: (0..p).map(|_| rng.random_range(0.2..2.0)).collect(),
            nugget: a * 10f64.powf(rng.random_range(-6.0..-2.0)),
        };

        let gram = DMatrix::from_fn(n, n, |i, j| {
            kernel(x[i].values(), x[j].values(), &h).unwrap() + if i == j { h.nugget } else { 0.0 }
        });
        let lu = gram.lu();
        let r = DVector::from_iterator(n, y.iter().map(|v| v - h.beta0));
        let w = lu.solve(&r).unwrap();
        let emu = CellEmulator::from_hyperparameters(h.clone(), x.clone(), y.clone()).unwrap();
        for _ in 0..10 {
            let u = ParameterVector::new_unchecked((0..p).map(|_| rng.random_range(-0.2..1.2)).collect());
            let ks = DVector::from_fn(n, |i, _| kernel(u.values(), x[i].values(), &h).unwrap());
            let z = lu.solve(&ks).unwrap();
            let md = h.beta0 + ks.dot(&w);
            let vd = a + h.nugget - ks.dot(&z);
            let (m, v) = emu.predict(&u);
            worst_mean = worst_mean.max((m - md).abs() / md.abs().max(a.sqrt()));
            worst_var = worst_var.max((v - vd).abs() / (a + h.nugget));
        }

        let ws = LmlWorkspace::new(&x, &y).unwrap();
        let theta = h.to_log_params();
        let (_, g) = ws.evaluate(&h).unwrap();
        let step = 1e-5;
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[i] += step;
                dn[i] -= step;
                let fu = ws.evaluate(&Hyperparameters::from_log_params(&up)).unwrap().0;
                let fdn = ws.evaluate(&Hyperparameters::from_log_params(&dn)).unwrap().0;
                (fu - fdn) / (2.0 * step)
            })
            .collect();
        let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst_grad = worst_grad.max(err / norm.max(1e-8));
    }
    outcome(
        worst_mean <= 1e-10 && worst_var <= 1e-10 && worst_grad <= 1e-4,
        format!("mean rel {worst_mean:.1e}, var rel {worst_var:.1e}, gradient rel {worst_grad:.1e}"),
    )
}

// 2. rejection rate at the true parameter with the forward model itself
fn null_calibration() -> Outcome {
    let reps = 2000;
    let mut spec = SyntheticSpec::example(3, 10, 20, 2, 21);
    let grid = full_grid(&spec);
    let truth = ParameterVector::new_unchecked(spec.u_star.clone());
    let preds = oracle_predictions(&spec, &grid, &[truth]).unwrap();
    let crit = critical_value(grid.len(), 0.05).unwrap();
    let mut rejections = 0;
    let mut squares = Vec::with_capacity(reps);
    for r in 0..reps {
        spec.noise_seed = 1000 + r as u64;
        let data = generate(&spec).unwrap();
        let align = Alignment::new(&preds, &data.observations, &grid).unwrap();
        let i = implausibility(&align, 0, spec.delta2).unwrap();
        if i > crit {
            rejections += 1;
        }
        squares.push(i * i);
    }
    let rate = rejections as f64 / reps as f64;
    squares.sort_by(f64::total_cmp);
    let chi = ChiSquared::new(grid.len() as f64).unwrap();
    let ks = squares
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = chi.cdf(s);
            (f - i as f64 / reps as f64)
                .abs()
                .max(((i + 1) as f64 / reps as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    outcome(
        (0.035..=0.065).contains(&rate),
        format!(
            "rejection rate {rate:.4} over {reps} runs, |M*| = {}, KS vs chi2 {ks:.4}",
            grid.len()
        ),
    )
}

fn pipeline_manifest(seed: u64, base: &Path) -> RunManifest {
    let mut m = RunManifest::synthetic_example(3, 10, 20, seed);
    m.base = base.to_path_buf();
    m
}

// 3. coverage of the inverted set over replicated full pipeline runs
fn coverage() -> Outcome {
    let reps = 200;
    let mut covered = 0;
    let mut sizes = Vec::new();
    for r in 0..reps {
        let dir = tempfile::tempdir().unwrap();
        let mut m = pipeline_manifest(500 + r, dir.path());
        let syn = m.synthetic.as_mut().unwrap();
        syn.n_members = 60;
        syn.outlier_fraction = 0.0;
        m.tests.count = 499;
        m.train.restarts = 2;
        let runner = Runner {
            manifest: m,
            force: false,
        };
        runner.run_all().unwrap();
        let s: Summary =
            serde_json::from_slice(&std::fs::read(dir.path().join("work/report/summary.json")).unwrap()).unwrap();
        if s.truth_retained == Some(true) {
            covered += 1;
        }
        sizes.push(s.df);
    }
    let rate = covered as f64 / reps as f64;
    let min_df = sizes.iter().min().unwrap();
    outcome(
        rate >= 0.90,
        format!("u* retained in {covered}/{reps} runs ({rate:.3}), smallest |M*| = {min_df}"),
    )
}

// 4. discrepancy MLE against the truth and against a dense grid search
fn discrepancy_recovery() -> Outcome {
    let cfg = DiscrepancyConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    let mut worst_ll = 0f64;
    for &d2 in &[0.0, 0.01, 0.04] {
        let mut got = Vec::new();
        for seed in 0..5 {
            let mut spec = SyntheticSpec::example(3, 20, 25, 2, 40 + seed);
            spec.delta2 = d2;
            let data = generate(&spec).unwrap();
            let grid = full_grid(&spec);
            let tests = unit_tests(3, 1000, 70 + seed, &spec.u_star);
            let preds = oracle_predictions(&spec, &grid, &tests).unwrap();
            let align = Alignment::new(&preds, &data.observations, &grid).unwrap();
            let est = estimate(&align, &cfg).unwrap();
            let hit = if d2 == 0.0 {
                est.delta2 <= 0.005
            } else {
                (est.delta2 - d2).abs() <= 0.3 * d2
            };
            ok &= hit;
            got.push(est.delta2);

            let k = est.best_k;
            let msr = align.terms(k).map(|(r, _)| r * r).sum::<f64>() / align.len() as f64;
            let upper = (10.0 * msr).max(2.0 * est.delta2);
            let points = 100_000;
            let spacing = upper / (points - 1) as f64;
            let (gx, gll) = (0..points)
                .map(|i| {
                    let x = i as f64 * spacing;
                    (x, log_likelihood(&align, k, x).unwrap_or(f64::NEG_INFINITY))
                })
                .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            let rel = (est.loglik - gll).abs() / gll.abs();
            worst_ll = worst_ll.max(rel);
            ok &= rel <= 1e-6 && est.loglik >= gll - 1e-12 * gll.abs() && (est.delta2 - gx).abs() <= spacing;
        }
        let shown: Vec<String> = got.iter().map(|v| format!("{v:.4}")).collect();
        parts.push(format!("truth {d2}: [{}]", shown.join(", ")));
    }
    outcome(
        ok,
        format!("{}; worst loglik rel vs grid {worst_ll:.1e}", parts.join("; ")),
    )
}

fn closed_form_max(m: usize, level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    n.inverse_cdf((1.0 + (1.0 - level).powf(1.0 / m as f64)) / 2.0)
}

// 5. history-matching critical values and nesting of retained sets
fn history_matching() -> Outcome {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let samples = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for &m in &[10usize, 100, 1000] {
        let cfg = HMConfig {
            mode: HmMode::Quantile(1.0),
            level: 0.05,
            mc_samples: samples,
            seed: 5,
        };
        let mc = hm_critical(m, &cfg).unwrap();
        let t = closed_form_max(m, 0.05);
        let density = m as f64 * (2.0 * normal.cdf(t) - 1.0).powi(m as i32 - 1) * 2.0 * normal.pdf(t);
        let se = (0.95 * 0.05 / samples as f64).sqrt() / density;
        let z = (mc - t).abs() / se;
        ok &= z <= 3.0;
        parts.push(format!("m={m}: mc {mc:.4} exact {t:.4} ({z:.2} se)"));
    }

    // the tail-weighted statistic (75th percentile of |residual|) against the
    // median on the same data; asserted at 1000 cells, 200 shown for reference
    for (lat, lon, asserted) in [(25usize, 40usize, true), (10, 20, false)] {
        let trials = 50;
        let mut nested = 0;
        let mut nested_low = 0;
        let mut sizes = (0usize, 0usize);
        for trial in 0..trials {
            let spec = SyntheticSpec::example(3, lat, lon, 2, 900 + trial);
            let data = generate(&spec).unwrap();
            let grid = full_grid(&spec);
            let tests = unit_tests(3, 500, 950 + trial, &spec.u_star);
            let preds = oracle_predictions(&spec, &grid, &tests).unwrap();
            let align = Alignment::new(&preds, &data.observations, &grid).unwrap();
            let d2 = estimate(&align, &DiscrepancyConfig::default()).unwrap().delta2;
            let retained = |q: f64| -> BTreeSet<usize> {
                let cfg = HMConfig {
                    mode: HmMode::Quantile(q),
                    level: 0.05,
                    mc_samples: 20_000,
                    seed: trial,
                };
                hm_test_all(&align, d2, &cfg)
                    .unwrap()
                    .into_iter()
                    .filter(|o| !o.reject)
                    .map(|o| o.k)
                    .collect()
            };
            let upper = retained(0.75);
            let median = retained(0.5);
            let lower = retained(0.25);
            if median.is_superset(&upper) {
                nested += 1;
            }
            if median.is_superset(&lower) {
                nested_low += 1;
            }
            sizes.0 += upper.len();
            sizes.1 += median.len();
        }
        if asserted {
            ok &= nested as f64 / trials as f64 >= 0.95;
        }
        parts.push(format!(
            "|M|={}{}: median set contains 75th-percentile set in {nested}/{trials} (mean sizes {:.1} vs {:.1}), \
             contains 25th-percentile set in {nested_low}/{trials}",
            lat * lon,
            if asserted { "" } else { " (reference)" },
            sizes.0 as f64 / trials as f64,
            sizes.1 as f64 / trials as f64
        ));
    }
    outcome(ok, parts.join("; "))
}

// 6. planted outliers recovered by the filter at its default threshold
fn outlier_filter() -> Outcome {
    let (mut tp, mut fp, mut planted) = (0usize, 0usize, 0usize);
    for seed in 0..5u64 {
        let mut spec = SyntheticSpec::example(3, 25, 40, 40, 300 + seed);
        spec.outlier_fraction = 0.02;
        spec.family.amplitude = 0.05;
        spec.family.slope = 0.05;
        let data = generate(&spec).unwrap();
        let fleet = train_fleet(
            &data.training,
            &FleetConfig {
                fit: FitConfig {
                    restarts: 1,
                    ..FitConfig::default()
                },
                seed,
                workers: 0,
            },
        )
        .unwrap();
        let tests = sample_test_parameters(&spec.space, 500, 600 + seed, SamplingStrategy::Uniform).unwrap();
        let preds = predict_fleet(&fleet, &tests, 0).unwrap();
        let rep = find_outliers(&preds, &data.observations, None, None).unwrap();
        let truth: BTreeSet<_> = data.truth.outliers.iter().copied().collect();
        planted += truth.len();
        for v in &rep.cells {
            if v.status == CellStatus::Outlier {
                if truth.contains(&v.cell) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let recall = tp as f64 / planted as f64;
    outcome(
        precision >= 0.95 && recall >= 0.95,
        format!("precision {precision:.3}, recall {recall:.3} ({tp} of {planted} planted, {fp} false) over 5000 cells"),
    )
}

fn training_set(lat: usize, lon: usize, n: usize) -> TrainingSet {
    generate(&SyntheticSpec::example(3, lat, lon, n, 77)).unwrap().training
}

fn time_training(train: &TrainingSet) -> Duration {
    let cfg = FleetConfig {
        fit: FitConfig {
            restarts: 1,
            max_iters: 25,
            max_evals: 25,
            pgtol: 0.0,
            ftol: 0.0,
            ..FitConfig::default()
        },
        seed: 1,
        workers: 1,
    };
    let t = Instant::now();
    train_fleet(train, &cfg).unwrap();
    t.elapsed()
}

/// Minimum time per set over several interleaved rounds, so a slow stretch
/// on a shared machine hits every size alike.
fn best_times(sets: &[TrainingSet]) -> Vec<f64> {
    let mut best = vec![f64::INFINITY; sets.len()];
    for _ in 0..5 {
        for (b, s) in best.iter_mut().zip(sets) {
            *b = b.min(time_training(s).as_secs_f64());
        }
    }
    best
}

// 7. training cost linear in cells and cubic in ensemble size
fn scaling() -> Outcome {
    let sizes = [(5usize, 10usize), (10, 10), (10, 20), (20, 20)];
    let xs: Vec<f64> = sizes.iter().map(|(a, b)| (a * b) as f64).collect();
    let sets: Vec<TrainingSet> = sizes.iter().map(|&(a, b)| training_set(a, b, 60)).collect();
    let ys = best_times(&sets);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);

    let by_n = best_times(&[training_set(5, 10, 100), training_set(5, 10, 200)]);
    let ratio = by_n[1] / by_n[0];
    let times: Vec<String> = ys.iter().map(|y| format!("{:.3}s", y)).collect();
    outcome(
        r2 >= 0.98 && (4.0..=16.0).contains(&ratio),
        format!(
            "times over |M| = 50..400: [{}], R2 {r2:.4}; n 100 -> 200 per-cell ratio {ratio:.2}",
            times.join(", ")
        ),
    )
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

// 8. identical artifacts for different worker counts
fn determinism() -> Outcome {
    let mut trees = Vec::new();
    for workers in [1usize, 8] {
        let dir = tempfile::tempdir().unwrap();
        let mut m = pipeline_manifest(8, dir.path());
        m.workers = workers;
        Runner {
            manifest: m,
            force: false,
        }
        .run_all()
        .unwrap();
        let mut files = BTreeMap::new();
        collect_files(dir.path(), dir.path(), &mut files);
        trees.push(files);
    }
    let same_names = trees[0].keys().eq(trees[1].keys());
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    outcome(
        same_names && differing.is_empty(),
        format!(
            "{} files compared, {} differ {:?}",
            trees[0].len(),
            differing.len(),
            differing
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [Criterion; 8] = [
        (1, "GP prediction and likelihood gradient", gp_correctness),
        (2, "null calibration of the plausibility test", null_calibration),
        (3, "coverage of the confidence set", coverage),
        (4, "discrepancy variance recovery", discrepancy_recovery),
        (5, "history-matching critical value and nesting", history_matching),
        (6, "outlier filter precision and recall", outlier_filter),
        (7, "training time scaling", scaling),
        (8, "determinism across worker counts", determinism),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{} [{id}] {name}: {} ({secs:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
