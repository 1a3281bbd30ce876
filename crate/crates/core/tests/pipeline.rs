//! End-to-end runs of scaled-down experiments through `run_experiment`.

use std::path::Path;

use hjb_split::harness::{run_experiment, ExperimentConfig, ExperimentId, RunOptions};

fn quick_table(extra: &[&str]) -> ExperimentConfig {
    let mut overrides: Vec<String> = [
        "problem.dim=2",
        "problem.horizon=0.2",
        "pi_lambda.n_trajectories=6",
        "pi_lambda.policy_iterations=3",
        "pi_lambda.adam_steps=40",
        "pi_lambda.residual_points=300",
        "pi_lambda.residual_window=2",
        "pi_lambda.rbf_max_centers=12",
        "sweep.mu=[0.8, 0.4]",
        "sweep.n=[6, 8]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::resolve(Some(ExperimentId::Table2), None, &overrides).unwrap()
}

fn run(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> hjb_split::harness::AcceptanceReport {
    let opts = RunOptions {
        out_dir: dir.to_path_buf(),
        plots: true,
        workers: Some(workers),
    };
    run_experiment(cfg, &opts).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn table_run_emits_both_cases_in_sweep_layout() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(&quick_table(&[]), dir.path(), 2);
    for case in ["T1", "T2"] {
        let csv = read(dir.path(), &format!("table_{case}.csv"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "mu,N=6,N=8");
        assert!(lines[1].starts_with("0.8,") && lines[2].starts_with("0.4,"), "{csv}");
        for row in &lines[1..] {
            for cell in row.split(',').skip(1) {
                let v: f64 = cell.parse().unwrap();
                assert!(v.is_finite() && v >= 0.0, "{row}");
            }
        }
    }
    let cells = read(dir.path(), "cells.csv");
    // 2 cases x 2 mu x 2 N cells, 2 slices each
    assert_eq!(cells.lines().count(), 1 + 16);
    let names: Vec<&str> = report.criteria.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, ["table2-band", "sweep-isolation"]);
    assert!(report.criteria[1].passed, "{}", report.criteria[1].detail);
    let json: serde_json::Value = serde_json::from_str(&read(dir.path(), "acceptance.json")).unwrap();
    assert_eq!(json["experiment"], "table2");
    assert!(json["files"].as_array().unwrap().iter().any(|f| f == "table_T2.csv"));
    let snapshot = ExperimentConfig::from_toml(&read(dir.path(), "config.snapshot")).unwrap();
    assert_eq!(snapshot, quick_table(&[]));
}

#[test]
fn table_outputs_do_not_depend_on_worker_count() {
    let cfg = quick_table(&["sweep.drift=[\"random-gram\"]"]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, a.path(), 1);
    run(&cfg, b.path(), 3);
    for f in ["table_T2.csv", "cells.csv", "config.snapshot"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn seed_changes_the_initial_states() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = ["sweep.mu=[0.4]", "sweep.n=[6]", "sweep.drift=[\"identity\"]"];
    run(&quick_table(&one), a.path(), 1);
    let mut other = one.to_vec();
    other.push("seed=2");
    run(&quick_table(&other), b.path(), 1);
    let hash = |dir: &Path| {
        read(dir, "cells.csv")
            .lines()
            .nth(1)
            .unwrap()
            .rsplit(',')
            .next()
            .unwrap()
            .to_string()
    };
    assert_ne!(hash(a.path()), hash(b.path()));
}

#[test]
fn pi_convergence_artifacts_are_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::resolve(Some(ExperimentId::PiConvergence), None, &["convergence.iterations=4".to_string()]).unwrap();
    let report = run(&cfg, dir.path(), 1);
    let errors = read(dir.path(), "errors.csv");
    assert_eq!(errors.lines().count(), 1 + 4, "{errors}");
    assert!(dir.path().join("errors.svg").exists());
    assert_eq!(report.criteria.len(), 1);
    assert_eq!(report.criteria[0].name, "pi-contraction");
}
