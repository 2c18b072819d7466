use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn llhmc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llhmc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const FAST: [&str; 10] = [
    "--set",
    "data.kind=clusters",
    "--set",
    "data.per_class=40",
    "--set",
    "backbone.enabled=false",
    "--set",
    "sampler.burn_in=20",
    "--set",
    "sampler.samples=10",
];

#[test]
fn toy_data_then_fit_and_evaluate_a_saved_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(
        llhmc(&["toy", "moons", "--n", "80", "--seed", "1", "--out", "moons.csv"], d)
            .status
            .success()
    );
    let csv = fs::read_to_string(d.join("moons.csv")).unwrap();
    assert_eq!(csv.lines().count(), 81);

    let fit = llhmc(
        &[
            "fit",
            "--set",
            "method=map",
            "--set",
            "backbone.optimizer.epochs=20",
            "--seed",
            "0",
            "--out",
            "p.json",
        ],
        d,
    );
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let eval = llhmc(
        &[
            "evaluate",
            "--predictor",
            "p.json",
            "--data",
            "moons.csv",
            "--seed",
            "0",
        ],
        d,
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() > 50.0);
}

#[test]
fn evaluate_defaults_to_config_seeds_and_persists_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["evaluate", "--set", "seeds=[3, 4]", "--out", "runs"];
    args.extend(FAST);
    let out = llhmc(&args, d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(d.join("runs/runs")).unwrap().count(), 2);
    assert_eq!(
        fs::read_to_string(d.join("runs/results.csv")).unwrap().lines().count(),
        3
    );

    let mut none = vec!["evaluate", "--set", "seeds=[]"];
    none.extend(FAST);
    assert_eq!(llhmc(&none, d).status.code(), Some(2));
}

#[test]
fn grid_resumes_and_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("grid.toml"), "[axes]\nprior_std = [0.5, 1.0]\n").unwrap();
    let mut args = vec!["grid", "--grid", "grid.toml", "--seed", "0,1", "--out", "g"];
    args.extend(FAST);
    let first = llhmc(&args, d);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let csv = fs::read_to_string(d.join("g/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let second = llhmc(&args, d);
    assert!(second.status.success());
    assert_eq!(fs::read_to_string(d.join("g/results.csv")).unwrap(), csv);
    assert_eq!(first.stdout, second.stdout);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("g/summary.json")).unwrap()).unwrap();
    assert!(summary["best_cell"].as_str().unwrap().starts_with("prior_std="));
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = llhmc(
        &["fit", "--set", "no_such_key=1", "--seed", "0", "--out", "p.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
