//! Drives the `rpursuit` binary and checks its files and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use rpursuit::bench::run_experiment;
use rpursuit::cli::{format_table, parse_config_text, config_from_settings, read_summary, TableFormat, PLOT_HEADER, SUMMARY_SCHEMA, TRAJECTORY_HEADER};
use rpursuit::exec::Execution;

fn rp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpursuit"))
        .args(args)
        .env_remove("RP_SEED")
        .output()
        .expect("spawn rpursuit")
}

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--function",
        "f3",
        "--ellpow",
        "3",
        "--n",
        "5",
        "--trials",
        "3",
        "--budget",
        "2500",
        "--kappa",
        "true",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    rp(&args)
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = run_small(&out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let traj = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some(TRAJECTORY_HEADER));
    let trials: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(trials.len(), 3);

    let plot = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    assert_eq!(plot.lines().next(), Some(PLOT_HEADER));

    let s = read_summary(&out.join("summary.json")).unwrap();
    assert_eq!(s.schema, SUMMARY_SCHEMA);
    assert_eq!(s.trials.len(), 3);
    assert_eq!(s.config.n, 5);
    assert_eq!(s.stop_reasons.values().sum::<usize>(), 3);

    // config.txt feeds back into an identical run
    let text = std::fs::read_to_string(out.join("config.txt")).unwrap();
    let (c, _) = config_from_settings(&parse_config_text(&text).unwrap()).unwrap();
    assert_eq!(c, s.config);
    let o = rp(&["run", "--config", out.join("config.txt").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("trajectories.csv")).unwrap(), traj);
}

#[test]
fn flags_override_config_file_and_seed_env_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "function = f3\nell = 1e3\nn = 4\ntrials = 2\nbudget = 800\n").unwrap();
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_rpursuit"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--n", "6", "--out", out.to_str().unwrap()])
        .env("RP_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_summary(&out.join("summary.json")).unwrap();
    assert_eq!(s.config.n, 6);
    assert_eq!(s.config.seed, 42);
    assert_eq!(s.config.budget_fes, Some(800));
}

#[test]
fn exit_codes() {
    assert_eq!(rp(&["--version"]).status.code(), Some(0));
    assert_eq!(rp(&["frobnicate"]).status.code(), Some(1));
    let bad = rp(&["run", "--function", "f3", "--ell", "1e3", "--trials", "0"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("trials"));
    assert_eq!(rp(&["run", "--function", "g", "--ell", "10"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(rp(&["table", missing.to_str().unwrap()]).status.code(), Some(2));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = run_small(&blocker.join("sub"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(rp(&["verify", "diag"]).status.code(), Some(0));
}

#[test]
fn table_matches_direct_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_small(&a, &["--algo", "vrp"]).status.success());
    assert!(run_small(&b, &["--algo", "frp"]).status.success());
    let o = rp(&["table", "--format", "csv", a.join("summary.json").to_str().unwrap(), b.join("summary.json").to_str().unwrap()]);
    assert!(o.status.success());
    let printed = String::from_utf8(o.stdout).unwrap();

    let direct: Vec<_> = [&a, &b]
        .iter()
        .map(|d| {
            let s = read_summary(&d.join("summary.json")).unwrap();
            run_experiment(&s.config, Execution::Sequential).unwrap().decade_table()
        })
        .collect();
    assert_eq!(printed, format_table(&direct, TableFormat::Csv).unwrap());
    assert_eq!(printed.lines().count(), 3);
}

#[test]
fn table_rejects_mixed_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_small(&a, &[]).status.success());
    assert!(run_small(&b, &["--n", "6"]).status.success());
    let o = rp(&["table", a.join("summary.json").to_str().unwrap(), b.join("summary.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
