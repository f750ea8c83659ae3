//! End-to-end binary tests: the documented example invocations and the
//! exit-code contract.

use std::process::Command;

use elppi::harness::{generate, Scenario, ScenarioParams};
use elppi::model::save_dataset;
use elppi::numeric::rep_rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_elppi"))
}

#[test]
fn simulate_smoke_spec_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"scenario": "mean_inference", "n": 60, "m": 300,
            "methods": ["supervised", "ppi", "ppi_power_tuned", "epi_basis", "supervised_el"],
            "replications": 10, "alpha": 0.1, "seed": 5}"#,
    )
    .unwrap();
    let output = bin().args(["simulate", "--spec"]).arg(&spec).output().unwrap();
    assert!(output.status.success(), "{output:?}");
    let summary: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(summary["replications"], 10);
    assert_eq!(summary["n_failures"], 0);
    let rows = summary["metrics"].as_array().unwrap();
    let has = |method: &str, metric: &str| {
        rows.iter()
            .any(|r| r["method"] == method && r["metric"] == metric)
    };
    for method in ["supervised", "ppi", "ppi_power_tuned", "epi_basis", "supervised_el"] {
        for metric in [
            "mse",
            "rel_mse",
            "coverage",
            "miscoverage_lower",
            "miscoverage_upper",
            "ci_length",
            "ci_length_ratio",
            "rejection_rate",
        ] {
            assert!(has(method, metric), "missing {method}/{metric}");
        }
    }
}

#[test]
fn fit_with_no_auxiliary_returns_the_column_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.csv");
    std::fs::write(
        &data,
        "labeled,y,y_tilde,x1\n1,1.0,1.1,0.2\n1,2.0,2.2,0.4\n1,3.0,2.9,0.1\n1,4.0,4.3,0.6\n0,,2.5,0.3\n0,,1.5,0.7\n",
    )
    .unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"model": {"type": "mean"}, "aux": {"kind": "none"}}"#).unwrap();
    let output = bin()
        .args(["fit", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let theta = report["fit"]["theta_hat"][0].as_f64().unwrap();
    assert_eq!(theta, 2.5);
}

#[test]
fn ci_reports_wald_and_finite_ratio_interval() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("draw.csv");
    let mut rng = rep_rng(17, 0);
    let data = generate(
        Scenario::MeanInference,
        &ScenarioParams::default(),
        100,
        1000,
        &mut rng,
    )
    .unwrap();
    save_dataset(&data_path, &data).unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"model": {"type": "mean"}, "aux": {"kind": "fixed_basis", "degree": 1}, "alpha": 0.1}"#,
    )
    .unwrap();
    let output = bin()
        .args(["ci", "--data"])
        .arg(&data_path)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let wald = &report["report"]["wald"][0];
    assert!(wald["lo"].as_f64().unwrap() < wald["hi"].as_f64().unwrap());
    let lr = &report["report"]["lr_interval"]["interval"];
    let (lo, hi) = (lr["lo"].as_f64().unwrap(), lr["hi"].as_f64().unwrap());
    assert!(lo.is_finite() && hi.is_finite() && lo < hi);
    assert_eq!(lr["lo_unbounded"], false);
    assert_eq!(lr["hi_unbounded"], false);
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["fit", "--data", "/nonexistent.csv", "--config", "/nonexistent.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("selftest: 5 checks passed"));
}
