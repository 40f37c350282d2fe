//! Acceptance criteria AC1–AC11.
//!
//! Everything runs inside one test, one criterion after another, so the
//! runtime limits are measured without the other criteria competing for the
//! CPU. Each criterion prints a single `ACk PASS|FAIL` line; the test fails
//! at the end if any criterion failed.

use std::time::{Duration, Instant};

use rpursuit::bench::{run_experiment, Algorithm, ExperimentConfig, Family, LineSearchSpec, MatrixInit};
use rpursuit::cli::{
    cmd_run, verify_diag, verify_moments, verify_pd, verify_propagation, verify_rhe_exact, verify_single_step,
    verify_store, Check, RunArgs,
};
use rpursuit::exec::Execution;
use rpursuit::hessian::UpdateScheme;
use rpursuit::linesearch::AdaptiveStepState;
use rpursuit::metric::PdMatrix;
use rpursuit::pursuit::{Recording, StopReason};
use rpursuit::theory::rho_hat;

const SEED: u64 = 20_240_601;
const EXEC: Execution = Execution::Parallel;

struct Outcome {
    passed: bool,
    detail: String,
}

fn checks_outcome(checks: &[Check]) -> Outcome {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} = {:e} (tol {:e})", c.name, c.measured, c.tolerance))
        .collect();
    Outcome {
        passed: failed.is_empty() && !checks.is_empty(),
        detail: if failed.is_empty() {
            let shown: Vec<String> = checks
                .iter()
                .map(|c| format!("{} = {:.3e} (tol {:.3e})", c.name, c.measured, c.tolerance))
                .collect();
            shown.join("; ")
        } else {
            failed.join("; ")
        },
    }
}

fn criterion(id: &str, limit: Duration, results: &mut Vec<(String, bool)>, body: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let o = body();
    let took = start.elapsed();
    let in_time = took <= limit;
    let passed = o.passed && in_time;
    println!(
        "{id} {} [{:.1}s / limit {:.0}s{}] {}",
        if passed { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs_f64(),
        if in_time { "" } else { ", too slow" },
        o.detail
    );
    results.push((id.to_string(), passed));
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

/// Least-squares slope of `ln y` against `x`, returned as a per-step factor.
fn fitted_factor(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.1 > 0.0).map(|&(x, y)| (x, y.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxy / sxx).exp()
}

struct RateRun {
    fitted: f64,
    table: f64,
    worst_bound_ratio: f64,
}

fn frp_rate_run(i: usize) -> RateRun {
    let (n, ell) = (50usize, 1000.0);
    let mut c = ExperimentConfig::new(Family::G { ell, i }, n);
    c.algorithm = Algorithm::Frp;
    c.init = MatrixInit::Identity;
    c.linesearch = LineSearchSpec::Exact { confirm: None };
    c.budget_fes = None;
    c.target_gap = None;
    c.max_iterations = Some(40_000);
    c.trials = 31;
    c.seed = SEED;
    c.record = Recording {
        every: 100,
        kappa: false,
        spectrum: false,
    };
    let e = run_experiment(&c, EXEC).expect("rate experiment");
    let series = e.plot_series();
    let diag: Vec<f64> = (0..n).map(|k| if k < i { ell } else { 1.0 }).collect();
    let h = PdMatrix::from_diagonal(&diag).unwrap();
    let rho = rho_hat(&h, &PdMatrix::identity(n), &h, 1.0).unwrap();
    let g0 = series[0].mean;
    let worst_bound_ratio = series
        .iter()
        .map(|p| p.mean / (g0 * rho.powf(p.iteration as f64)))
        .fold(0.0f64, f64::max);
    let fitted = fitted_factor(&series.iter().map(|p| (p.iteration as f64, p.mean)).collect::<Vec<_>>());
    let table = 1.0 - 1.0 / (i as f64 * ell + (n - i) as f64);
    RateRun {
        fitted,
        table,
        worst_bound_ratio,
    }
}

fn ac6() -> Outcome {
    let g25 = frp_rate_run(25);
    let g5 = frp_rate_run(5);
    let below = g25.worst_bound_ratio <= 1.0 + 1e-9 && g5.worst_bound_ratio <= 1.0 + 1e-9;
    let faster = g5.fitted < g25.fitted;
    let within = g25.fitted <= g25.table + 1e-5 && g5.fitted <= g5.table + 1e-5;
    Outcome {
        passed: below && faster && within,
        detail: format!(
            "(a) max mean/bound g25 {:.4} g5 {:.4}; (b) fitted g5 {:.8} < g25 {:.8}: {faster}; (c) vs table g25 {:.8} g5 {:.8}: {within}",
            g25.worst_bound_ratio, g5.worst_bound_ratio, g5.fitted, g25.fitted, g25.table, g5.table
        ),
    }
}

fn ac7() -> Outcome {
    let n = 10usize;
    let budget = 200 * (n * n) as u64;
    let mut c = ExperimentConfig::new(Family::F3 { ell: 1e4 }, n);
    c.algorithm = Algorithm::Vrp;
    c.update = UpdateScheme::store_default();
    c.linesearch = LineSearchSpec::Exact { confirm: None };
    c.budget_fes = Some(budget);
    c.target_gap = Some(1e-8);
    c.trials = 31;
    c.seed = SEED;
    c.record = Recording {
        every: 1,
        kappa: true,
        spectrum: false,
    };
    let e = run_experiment(&c, EXEC).expect("vrp experiment");
    let reached = e.trials.iter().filter(|t| t.summary.reached_target).count();
    let early_kappa = e
        .trials
        .iter()
        .filter(|t| {
            t.trajectory
                .records
                .iter()
                .any(|r| r.fes < 100 * (n * n) as u64 && r.kappa.is_some_and(|k| k < 2.0))
        })
        .count();

    let mut f = c.clone();
    f.algorithm = Algorithm::Frp;
    f.init = MatrixInit::Identity;
    f.record = Recording::default();
    let ef = run_experiment(&f, EXEC).expect("frp experiment");
    let frp_hit = ef
        .trials
        .iter()
        .filter(|t| t.trajectory.records.iter().any(|r| r.gap.is_some_and(|g| g <= 1e-2)))
        .count();

    let t = c.trials as f64;
    let ok = reached as f64 >= 0.9 * t && early_kappa as f64 >= 0.8 * t && frp_hit as f64 <= 0.1 * t;
    Outcome {
        passed: ok,
        detail: format!(
            "V-RP reached 1e-8 in {reached}/31, κ(B⁻¹H) < 2 before 100n² FES in {early_kappa}/31; F-RP reached 1e-2 in {frp_hit}/31"
        ),
    }
}

fn ac8() -> Outcome {
    let n = 10usize;
    let mut c = ExperimentConfig::new(Family::F2, n);
    c.algorithm = Algorithm::Vrp;
    c.update = UpdateScheme::store_default();
    c.linesearch = LineSearchSpec::Es {
        state: AdaptiveStepState::default(),
    };
    c.budget_fes = Some(500 * (n * n) as u64);
    c.trials = 31;
    c.seed = SEED;
    let e = run_experiment(&c, EXEC).expect("vrp experiment");
    let mut gaps: Vec<f64> = e.trials.iter().map(|t| t.summary.final_gap).collect();
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    let table = e.decade_table();
    let deep = table
        .rows
        .iter()
        .any(|r| r.decade <= -7 && r.reached == table.trials && r.mean.is_some());

    let mut f = c.clone();
    f.algorithm = Algorithm::Frp;
    f.init = MatrixInit::Identity;
    let ef = run_experiment(&f, EXEC).expect("frp experiment");
    let stalled = ef.trials.iter().filter(|t| t.summary.final_gap > 1.0).count();
    let mut fgaps: Vec<f64> = ef.trials.iter().map(|t| t.summary.final_gap).collect();
    fgaps.sort_by(f64::total_cmp);

    let ok = median <= 1e-4 && deep && stalled * 2 > ef.trials.len();
    Outcome {
        passed: ok,
        detail: format!(
            "V-RP median final gap {median:.2e}, decade ≤ 1e-7 in table: {deep}; F-RP stalled above 1e0 in {stalled}/31 (final gaps {:.3e}..{:.3e})",
            fgaps[0],
            fgaps[fgaps.len() - 1]
        ),
    }
}

fn ac11() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("run");
    let args = RunArgs {
        function: Some("f3".into()),
        ell: Some("1e3".into()),
        n: Some("6".into()),
        trials: Some("4".into()),
        budget: Some("3000".into()),
        kappa: Some("true".into()),
        spectrum: Some("true".into()),
        seed: Some("7".into()),
        out: Some(out.display().to_string()),
        ..RunArgs::default()
    };
    let names = ["trajectories.csv", "summary.json", "plot.csv", "config.txt"];
    let read_all = || -> Vec<Vec<u8>> { names.iter().map(|n| std::fs::read(out.join(n)).expect("output file")).collect() };
    cmd_run(&args).expect("first run");
    let first = read_all();
    cmd_run(&args).expect("second run");
    let second = read_all();
    let seq = RunArgs {
        sequential: true,
        ..args
    };
    cmd_run(&seq).expect("sequential run");
    let third = read_all();
    let same: Vec<bool> = first.iter().zip(&second).map(|(a, b)| a == b).collect();
    let same_seq: Vec<bool> = first.iter().zip(&third).map(|(a, b)| a == b).collect();
    Outcome {
        passed: same.iter().all(|&b| b) && same_seq.iter().all(|&b| b),
        detail: format!("repeat identical {same:?}, sequential identical {same_seq:?} for {names:?}"),
    }
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    println!();
    criterion("AC1", secs(30), &mut results, || {
        checks_outcome(&verify_moments(&[3, 5, 8], 1_000_000, SEED, EXEC).unwrap())
    });
    criterion("AC2", secs(1), &mut results, || checks_outcome(&verify_diag(100).unwrap()));
    criterion("AC3", secs(120), &mut results, || {
        checks_outcome(&verify_rhe_exact(8, 300, 5000, SEED, EXEC).unwrap())
    });
    criterion("AC4", secs(10), &mut results, || {
        checks_outcome(&[verify_single_step(5, 100_000, SEED).unwrap()])
    });
    criterion("AC5", secs(20), &mut results, || checks_outcome(&verify_pd(10, 1e4, 10_000, SEED).unwrap()));
    criterion("AC6", secs(300), &mut results, ac6);
    criterion("AC7", secs(180), &mut results, ac7);
    criterion("AC8", secs(180), &mut results, ac8);
    criterion("AC9", secs(10), &mut results, || checks_outcome(&verify_propagation(200, SEED).unwrap()));
    criterion("AC10", secs(30), &mut results, || checks_outcome(&verify_store(6, 200, SEED, EXEC)));
    criterion("AC11", secs(120), &mut results, ac11);
    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn stop_reason_of_target_runs_is_target() {
    // sanity link between the summary fields the criteria above rely on
    let mut c = ExperimentConfig::new(Family::F3 { ell: 10.0 }, 4);
    c.trials = 2;
    let e = run_experiment(&c, Execution::Sequential).unwrap();
    for t in &e.trials {
        assert!(t.summary.reached_target);
        assert_eq!(t.summary.stop_reason, StopReason::Target);
        assert!(t.summary.final_gap <= 1e-8);
    }
}
