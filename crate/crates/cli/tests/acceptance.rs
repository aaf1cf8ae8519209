//! Acceptance checks, one line per criterion.
//!
//! `CONFBAL_ACCEPTANCE_ONLY=4,6` restricts the run to the listed criteria.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use confbal::diagnostics::{association_stats, balance_report, spearman};
use confbal::estimators::{estimate_ate, EstimateConfig, Method};
use confbal::forest::{grow_forest, FitData, ForestParams};
use confbal::kernel::{psd_check, rf_gram, GramMatrix, KernelSource};
use confbal::rng::stream_rng;
use confbal::simulation::{run_balance_experiment, run_experiment, DgpSpec, MethodSummary, Model, SimulationReport};
use confbal::weights::{kkt_solve_equality, mmd_squared, solve_weights, BalancingProblem, SolverOptions};
use confbal::Dataset;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Criteria that do not hold for this implementation; see the README
/// section "Known gaps". They still run and print FAIL.
const KNOWN_UNMET: &[u32] = &[6, 8];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Wishart draw `B B' / r` with `r >= n`, so full rank almost surely.
fn random_psd(rng: &mut impl Rng, n: usize) -> GramMatrix<f64> {
    let r = rng.random_range(n..=2 * n);
    let b = Array2::from_shape_fn((n, r), |_| rng.sample::<f64, _>(StandardNormal));
    let k = b.dot(&b.t()) / r as f64;
    GramMatrix::new((&k + &k.t()) / 2.0, KernelSource::Custom).unwrap()
}

fn random_labels(rng: &mut impl Rng, n: usize, min_arm: usize) -> Vec<bool> {
    loop {
        let a: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let n1 = a.iter().filter(|&&v| v).count();
        if n1 >= min_arm && n - n1 >= min_arm {
            return a;
        }
    }
}

/// Independent double loop over the centered signed weights.
fn mmd_double_loop(k: &GramMatrix<f64>, w: &[f64], group: bool, a: &[bool]) -> f64 {
    let n = w.len();
    let na = a.iter().filter(|&&v| v == group).count() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let ui = if a[i] == group { w[i] / na } else { 0.0 } - 1.0 / n as f64;
        for j in 0..n {
            let uj = if a[j] == group { w[j] / na } else { 0.0 } - 1.0 / n as f64;
            total += ui * uj * k.get(i, j);
        }
    }
    total
}

fn criterion_1() -> Verdict {
    let mut rng = stream_rng(1, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=20);
        let k = random_psd(&mut rng, n);
        let a = random_labels(&mut rng, n, 1);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        for g in [true, false] {
            worst = worst.max((mmd_squared(&k, &w, g, &a) - mmd_double_loop(&k, &w, g, &a)).abs());
        }
    }
    verdict(worst <= 1e-12, format!("max |triple sum - double loop| = {worst:.2e} over 200 instances"))
}

/// Per-arm objective in normalized weights `v = w / n_a`.
fn arm_objective(k: &GramMatrix<f64>, arm: &[usize], n: usize, lambda: f64, v: &[f64]) -> f64 {
    let na = arm.len() as f64;
    let mut quad = 0.0;
    let mut lin = 0.0;
    for (s, &i) in arm.iter().enumerate() {
        for (t, &j) in arm.iter().enumerate() {
            quad += v[s] * v[t] * k.get(i, j);
        }
        lin += v[s] * (0..n).map(|j| k.get(i, j)).sum::<f64>();
    }
    quad - 2.0 * lin / n as f64 + 0.5 * lambda * na * na * v.iter().map(|x| x * x).sum::<f64>()
}

/// Exhaustive search over the simplex with step `1 / steps`.
fn grid_argmin(k: &GramMatrix<f64>, arm: &[usize], n: usize, lambda: f64, steps: usize) -> (Vec<f64>, f64) {
    fn go(
        depth: usize,
        left: usize,
        cur: &mut Vec<usize>,
        best: &mut (Vec<f64>, f64),
        eval: &dyn Fn(&[f64]) -> f64,
        steps: usize,
        m: usize,
    ) {
        if depth == m - 1 {
            cur.push(left);
            let v: Vec<f64> = cur.iter().map(|&c| c as f64 / steps as f64).collect();
            let f = eval(&v);
            if f < best.1 {
                *best = (v, f);
            }
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            go(depth + 1, left - c, cur, best, eval, steps, m);
            cur.pop();
        }
    }
    let eval = |v: &[f64]| arm_objective(k, arm, n, lambda, v);
    let mut best = (Vec::new(), f64::INFINITY);
    go(0, steps, &mut Vec::new(), &mut best, &eval, steps, arm.len());
    best
}

fn criterion_2() -> Verdict {
    let mut rng = stream_rng(2, 0);
    let lambdas = [1e-3, 1.0, 10.0];
    let mut kkt_gap = 0.0f64;
    for t in 0..100 {
        let n = rng.random_range(3..=30);
        let a = random_labels(&mut rng, n, 1);
        let problem = BalancingProblem::new(random_psd(&mut rng, n), a, lambdas[t % 3], false).unwrap();
        let s = solve_weights(&problem, &SolverOptions::default());
        let oracle = kkt_solve_equality(&problem).unwrap();
        kkt_gap = kkt_gap.max(s.w.iter().zip(&oracle).fold(0.0, |m, (x, y)| m.max((x - y).abs())));
    }
    let mut grid_gap = 0.0f64;
    let mut objective_excess = f64::NEG_INFINITY;
    for t in 0..30 {
        let n = rng.random_range(4..=8);
        let a = loop {
            let a = random_labels(&mut rng, n, 2);
            if a.iter().filter(|&&v| v).count() <= 5 && a.iter().filter(|&&v| !v).count() <= 5 {
                break a;
            }
        };
        let lambda = lambdas[t % 3];
        let k = random_psd(&mut rng, n);
        let problem = BalancingProblem::new(k.clone(), a.clone(), lambda, true).unwrap();
        let s = solve_weights(&problem, &SolverOptions::default());
        for g in [true, false] {
            let arm: Vec<usize> = (0..n).filter(|&i| a[i] == g).collect();
            let na = arm.len() as f64;
            let (v_grid, f_grid) = grid_argmin(&k, &arm, n, lambda, 100);
            let v_solver: Vec<f64> = arm.iter().map(|&i| s.w[i] / na).collect();
            let f_solver = arm_objective(&k, &arm, n, lambda, &v_solver);
            objective_excess = objective_excess.max(f_solver - f_grid);
            grid_gap = grid_gap.max(v_grid.iter().zip(&v_solver).fold(0.0, |m, (x, y)| m.max((x - y).abs())));
        }
    }
    let pass = kkt_gap <= 1e-6 && grid_gap <= 0.01 && objective_excess <= 1e-12;
    verdict(
        pass,
        format!(
            "equality vs KKT max gap {kkt_gap:.2e}; nonneg vs grid max gap {grid_gap:.4} (normalized weights), solver objective minus grid best <= {objective_excess:.2e}"
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = stream_rng(3, 0);
    let mut failures = 0;
    let mut worst_ratio = f64::INFINITY;
    for f in 0..200u64 {
        let n_fit = rng.random_range(20..=120);
        let p = rng.random_range(1..=6);
        let x = Array2::from_shape_fn((n_fit, p), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n_fit).map(|i| x[[i, 0]] + rng.sample::<f64, StandardNormal>(StandardNormal)).collect();
        let a: Vec<f64> = (0..n_fit).map(|i| f64::from(x[[i, p - 1]] + rng.random_range(-1.0..1.0) > 0.0)).collect();
        let responses = vec![y, a];
        let fit = FitData::new(x.view(), &responses).unwrap();
        let params = ForestParams {
            trees: rng.random_range(10..=300),
            mtry: Some(rng.random_range(1..=p)),
            min_node: rng.random_range(1..=10),
            seed: f,
            ..Default::default()
        };
        let forest = grow_forest(&fit, &params).unwrap();
        let n_eval = rng.random_range(2..=50);
        let xe = Array2::from_shape_fn((n_eval, p), |_| rng.sample::<f64, _>(StandardNormal));
        let g = rf_gram(&forest, xe.view());
        let mut ok = true;
        for i in 0..n_eval {
            ok &= g.get(i, i) == 1.0;
            for j in 0..n_eval {
                ok &= g.get(i, j) == g.get(j, i) && (0.0..=1.0).contains(&g.get(i, j));
            }
        }
        let psd = psd_check(&g, 1e-8);
        ok &= psd.passed;
        worst_ratio = worst_ratio.min(psd.min_eigenvalue / psd.max_eigenvalue.abs());
        failures += usize::from(!ok);
    }
    verdict(failures == 0, format!("{failures}/200 Grams violate a property; min lambda_min/lambda_max = {worst_ratio:.2e}"))
}

fn criterion_4() -> Verdict {
    let config = EstimateConfig::default();
    let mut means = Vec::new();
    for n in [250usize, 1000, 4000] {
        let mut total = 0.0;
        for r in 0..20u64 {
            let mut rng = stream_rng(40_000 + r, n as u64);
            let x = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let pi: Vec<f64> = (0..n).map(|i| expit(0.3 + 0.8 * x[[i, 0]] - 0.6 * x[[i, 1]])).collect();
            let a: Vec<bool> = pi.iter().map(|&p| rng.random::<f64>() < p).collect();
            let y: Vec<f64> = (0..n)
                .map(|i| x[[i, 0]] + 0.5 * x[[i, 1]] + if a[i] { 1.0 } else { 0.0 } + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let d = Dataset::new(x, a.clone(), y).unwrap();
            let cfg = EstimateConfig { seed: 40_000 + r, ..config.clone() };
            let est = estimate_ate(&d, Method::RfKernelMmd, &cfg).unwrap();
            let eval = &est.split.as_ref().unwrap().eval_indices;
            let pbar = eval.iter().filter(|&&i| a[i]).count() as f64 / eval.len() as f64;
            let gap: f64 = eval
                .iter()
                .map(|&i| {
                    let target = if a[i] { pbar / pi[i] } else { (1.0 - pbar) / (1.0 - pi[i]) };
                    (est.weights[i] - target).powi(2)
                })
                .sum::<f64>()
                / eval.len() as f64;
            total += gap;
        }
        means.push(total / 20.0);
    }
    verdict(
        means[0] > means[1] && means[1] > means[2],
        format!("mean (1/n) sum (w - w*)^2 at n = 250, 1000, 4000: {:.4}, {:.4}, {:.4}", means[0], means[1], means[2]),
    )
}

fn criterion_5() -> Verdict {
    let methods = [Method::RfKernelMmd, Method::GaussianKernelMmd, Method::RfIpw];
    let config = EstimateConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, seed) in [(50usize, 50_000u64), (200, 52_000)] {
        let spec = DgpSpec::new(Model::Toy, 500, p, seed);
        let rows = run_balance_experiment(&spec, &methods, 50, seed, &config).unwrap();
        let wins = rows
            .iter()
            .filter(|(_, t)| t[0].gap() < t[1].gap() && t[0].gap() < t[2].gap())
            .count();
        let share = wins as f64 / rows.len() as f64;
        let avg = |m: usize| rows.iter().map(|(_, t)| t[m].gap()).sum::<f64>() / rows.len() as f64;
        pass &= share >= 0.6;
        parts.push(format!(
            "p={p}: proposed best in {wins}/{} ({:.0}%), mean gap rf {:.4} gauss {:.4} rf-ipw {:.4}",
            rows.len(),
            100.0 * share,
            avg(0),
            avg(1),
            avg(2)
        ));
    }
    verdict(pass, parts.join("; "))
}

fn summary_of(report: &SimulationReport, method: Method) -> MethodSummary {
    report.summary().into_iter().find(|s| s.method == method).unwrap()
}

fn truncated(report: &SimulationReport, reps: usize) -> SimulationReport {
    SimulationReport {
        reps,
        rows: report.rows.iter().filter(|r| r.replicate <= reps).cloned().collect(),
        ..report.clone()
    }
}

fn bias_line(report: &SimulationReport) -> String {
    report
        .summary()
        .iter()
        .map(|s| format!("{} {:+.3}", s.method, s.mean_bias))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_6() -> Verdict {
    let spec = DgpSpec::new(Model::Model1, 500, 100, 60_000);
    let methods = [Method::RfKernelMmd, Method::GaussianKernelMmd, Method::RfIpw];
    let full = run_experiment(&spec, &methods, 200, 60_000, &EstimateConfig::default()).unwrap();
    let ordered = |r: &SimulationReport| {
        let b = |m| summary_of(r, m).mean_bias.abs();
        b(Method::RfKernelMmd) < b(Method::GaussianKernelMmd) && b(Method::RfKernelMmd) < b(Method::RfIpw)
    };
    let smoke = truncated(&full, 50);
    let rf = summary_of(&full, Method::RfKernelMmd);
    let centered = rf.mean_bias.abs() <= 3.0 * rf.mc_se;
    let failures: usize = full.summary().iter().map(|s| s.failures).sum();
    verdict(
        ordered(&full) && ordered(&smoke) && centered && failures == 0,
        format!(
            "tau = {:.4}; reps 200: {} (rf mc se {:.3}, |bias|/se = {:.1}); reps 50 ordering {}",
            full.true_tau,
            bias_line(&full),
            rf.mc_se,
            rf.mean_bias.abs() / rf.mc_se,
            if ordered(&smoke) { "holds" } else { "fails" }
        ),
    )
}

fn criterion_7() -> Verdict {
    let spec = DgpSpec::new(Model::Model2, 500, 100, 70_000);
    let report = run_experiment(&spec, &Method::ALL, 50, 70_000, &EstimateConfig::default()).unwrap();
    let rf = summary_of(&report, Method::RfKernelMmd).mean_bias.abs();
    let smallest = report.summary().iter().all(|s| s.method == Method::RfKernelMmd || rf < s.mean_bias.abs());
    verdict(smallest, format!("reps 50: {}", bias_line(&report)))
}

fn criterion_8() -> Verdict {
    let spec = DgpSpec::new(Model::Model3, 500, 100, 80_000);
    let methods = [Method::RfKernelMmd, Method::LogisticIpw];
    let report = run_experiment(&spec, &methods, 50, 80_000, &EstimateConfig::default()).unwrap();
    let rf = summary_of(&report, Method::RfKernelMmd);
    let lg = summary_of(&report, Method::LogisticIpw);
    verdict(
        rf.mean_bias.abs() <= 2.0 * lg.mean_bias.abs(),
        format!(
            "reps 50: {} (logistic mc se {:.3}, rf mc se {:.3})",
            bias_line(&report),
            lg.mc_se,
            rf.mc_se
        ),
    )
}

/// Ten confounders, ten instruments, ten precision variables, ten nulls.
fn labeled_dgp(n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = stream_rng(seed, 0);
    let x = Array2::from_shape_fn((n, 40), |_| rng.sample::<f64, _>(StandardNormal));
    let a: Vec<bool> = (0..n)
        .map(|i| {
            let s: f64 = (0..20).map(|j| x[[i, j]]).sum();
            rng.random::<f64>() < expit(0.3 * s)
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let s: f64 = (0..10).chain(20..30).map(|j| x[[i, j]]).sum();
            s + if a[i] { 1.0 } else { 0.0 } + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Dataset::new(x, a, y).unwrap()
}

fn criterion_9() -> Verdict {
    let d = labeled_dgp(2000, 90_000);
    let est = estimate_ate(&d, Method::RfKernelMmd, &EstimateConfig { seed: 90_000, ..Default::default() }).unwrap();
    let eval = &est.split.as_ref().unwrap().eval_indices;
    let sub = d.subset(eval).unwrap();
    let w: Vec<f64> = eval.iter().map(|&i| est.weights[i]).collect();
    let balance = balance_report(&sub, &w).unwrap();
    let assoc = association_stats(&sub, 10);
    let (mut red, mut stat) = (Vec::new(), Vec::new());
    for row in &assoc.rows {
        if let (Some(s), Some(r)) = (row.min_stat(), balance.reduction_of(&row.name)) {
            stat.push(s);
            red.push(r);
        }
    }
    let rho = spearman(&red, &stat);
    verdict(rho > 0.3, format!("Spearman(SMD reduction, min stat) = {rho:.3} over {} covariates", red.len()))
}

fn criterion_10() -> Verdict {
    let dir = std::env::temp_dir().join(format!("confbal-acceptance-{}", std::process::id()));
    let input = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_confbal"))
        .args(["ate", "--method", "all", "--bootstrap", "200", "--seed", "100"])
        .arg("--input")
        .arg(&input)
        .arg("--out-dir")
        .arg(&dir)
        .output()
        .unwrap();
    if !out.status.success() {
        return verdict(false, format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let results = std::fs::read_to_string(dir.join("results.csv")).unwrap_or_default();
    let mut ok = true;
    let mut parts = Vec::new();
    for line in results.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let est: f64 = f[1].parse().unwrap_or(f64::NAN);
        let se: f64 = f[2].parse().unwrap_or(f64::NAN);
        let boot = std::fs::read_to_string(dir.join(format!("bootstrap_{}.csv", f[0]))).unwrap_or_default();
        ok &= est.is_finite() && se.is_finite() && se > 0.0 && boot.lines().count() == 201;
        parts.push(format!("{} {est:.3} ({se:.3})", f[0]));
    }
    ok &= parts.len() == 4 && dir.join("metadata.json").exists();
    let _ = std::fs::remove_dir_all(&dir);
    verdict(ok, format!("estimate (bootstrap se, B=200): {}", parts.join(", ")))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("CONFBAL_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "MMD triple sum equals double loop", criterion_1),
        (2, "QP solver matches KKT and grid oracles", criterion_2),
        (3, "forest Gram properties", criterion_3),
        (4, "weights approach normalized inverse propensity", criterion_4),
        (5, "toy balance ordering", criterion_5),
        (6, "Model 1 bias ordering and centering", criterion_6),
        (7, "Model 2 bias ordering", criterion_7),
        (8, "Model 3 within 2x of logistic IPW", criterion_8),
        (9, "diagnostics rank correlation", criterion_9),
        (10, "CLI end to end with bootstrap", criterion_10),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let elapsed = start.elapsed();
        let tag = match (v.pass, KNOWN_UNMET.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => {
                unexpected.push(id);
                "FAIL"
            }
        };
        println!("criterion {id:>2} [{tag}] {name}: {} [{}]", v.detail, fmt_secs(elapsed));
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
