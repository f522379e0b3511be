use std::fs;
use std::path::Path;

use flatl2o::harness::{
    compare, logged_iters, read_runs_csv, run_experiment, ExperimentConfig, RunOptions, Summary, CSV_HEADER,
};
use flatl2o::learned_optimizer::{decode_phi, save_phi};
use flatl2o::Error;

fn quadratic_sgd(grid: &str, iters: usize, seeds: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "name": "q-sgd",
            "task": {{ "quadratic": {{ "p": 6, "eig_range": [0.5, 2.0] }} }},
            "optimizer": {{ "baseline": {{ "config": {{ "kind": "sgd", "lr": 0.1 }} {grid} }} }},
            "meta_test": {{ "iters": {iters}, "seeds": {seeds} }}
        }}"#
    ))
    .unwrap()
}

fn linear_l2o(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "name": "q-linear",
            "seed": 3,
            "task": {{ "quadratic": {{ "p": 4, "eig_range": [0.5, 2.0] }} }},
            "optimizer": {{ "learned": {{ "rule": "linear" {extra} }} }},
            "meta": {{ "unroll": 5, "meta_steps": 20, "tasks_per_step": 2, "meta_lr": 0.01 }},
            "meta_test": {{ "iters": 30, "seeds": 3 }}
        }}"#
    ))
    .unwrap()
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions { out_dir: Some(dir.to_path_buf()), ..RunOptions::default() }
}

#[test]
fn sweep_has_one_row_per_lr_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_sgd(r#", "lr_grid": [0.01, 0.1, 0.3, 5.0]"#, 40, 3);
    let out = run_experiment(&cfg, &opts(dir.path())).unwrap();
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 3);
    assert!(rows.iter().filter(|r| r.starts_with("5,")).all(|r| r.ends_with(",true")));
    assert_eq!(out.best_lr, Some(0.3));
    let echo: ExperimentConfig = ExperimentConfig::load(&dir.path().join("config-echo.json")).unwrap();
    assert_eq!(echo, cfg);
}

#[test]
fn runs_csv_follows_logging_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&quadratic_sgd("", 2500, 2), &opts(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert!(!text.contains('\r'));
    let recs = read_runs_csv(&dir.path().join("runs.csv")).unwrap();
    assert_eq!(recs, out.records);
    let want = logged_iters(2500);
    for seed in [0, 1] {
        let iters: Vec<usize> = recs.iter().filter(|r| r.seed == seed).map(|r| r.iter).collect();
        assert_eq!(iters, want);
    }
    for r in &recs {
        assert_eq!(r.test_accuracy, -1.0);
        assert!(r.wall_ms >= 0.0);
        assert_eq!(r.hutchinson_trace.is_some(), r.iter == 2500);
    }
}

#[test]
fn log_flatness_fills_every_logged_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions { log_flatness: true, seeds: Some(2), ..opts(dir.path()) };
    let out = run_experiment(&quadratic_sgd("", 5, 4), &o).unwrap();
    assert_eq!(out.records.len(), 2 * 6);
    assert!(out.records.iter().all(|r| r.hutchinson_trace.is_some() && r.entropy_grad_norm.is_some()));
}

/// Median, mean and n−1 standard deviation recomputed straight from runs.csv.
#[test]
fn summary_matches_independent_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&quadratic_sgd("", 30, 5), &opts(dir.path())).unwrap();
    let s: Summary = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let text = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    for row in &s.rows {
        let mut v: Vec<f64> =
            rows.iter().filter(|r| r[1] == row.iter.to_string()).map(|r| r[2].parse().unwrap()).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if v.len() % 2 == 1 { v[v.len() / 2] } else { (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0 };
        let st = &row.metrics["train_loss"];
        assert!((st.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert!((st.median - median).abs() <= 1e-12 * median.abs().max(1.0));
        assert!((st.sd - sd).abs() <= 1e-12 * sd.abs().max(1.0));
    }
    assert!(!fs::read_to_string(dir.path().join("summary.json")).unwrap().contains("NaN"));
}

#[test]
fn learned_run_is_byte_identical_on_rerun_and_from_checkpoint() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = linear_l2o("");
    let first = run_experiment(&cfg, &opts(a.path())).unwrap();
    run_experiment(&cfg, &opts(b.path())).unwrap();
    let runs = |d: &Path| fs::read(d.join("runs.csv")).unwrap();
    assert_eq!(runs(a.path()), runs(b.path()));
    assert_eq!(fs::read_to_string(a.path().join("train_log.jsonl")).unwrap().lines().count(), 20);

    let ckpt = a.path().join("phi.bin");
    let phi = decode_phi(&fs::read(&ckpt).unwrap()).unwrap();
    assert_eq!(Some(phi), first.phi);
    let from_ckpt = linear_l2o(&format!(r#", "checkpoint": {:?}"#, ckpt.to_str().unwrap()));
    run_experiment(&from_ckpt, &opts(c.path())).unwrap();
    assert_eq!(runs(a.path()), runs(c.path()));
    assert!(!c.path().join("train_log.jsonl").exists());
}

#[test]
fn checkpoint_of_wrong_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("phi.bin");
    save_phi(&p, &[0.1, 0.2]).unwrap();
    let cfg = linear_l2o(&format!(r#", "checkpoint": {:?}"#, p.to_str().unwrap()));
    let err = run_experiment(&cfg, &opts(&dir.path().join("out"))).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        r#"{ "task": { "quadratic": { "p": 4, "eig_range": [0.5, 2.0] } }, "optimizer": { "learned": {} }, "typo": 1 }"#,
        r#"{ "task": { "quadratic": { "p": 4, "eig_range": [2.0, 0.5] } }, "optimizer": { "learned": {} } }"#,
        r#"{ "task": { "rosenbrock": { "p": 2 } }, "optimizer": { "baseline": { "config": { "kind": "sgd", "lr": -1 } } } }"#,
        r#"{ "task": { "rosenbrock": { "p": 2 } }, "optimizer": { "learned": {} }, "meta": { "unroll": 20, "meta_steps": 10, "curriculum": [ { "meta_steps": 5, "unroll": 20 } ] } }"#,
        r#"{ "task": { "rosenbrock": { "p": 2 } }, "optimizer": { "learned": {} }, "meta_test": { "seeds": 0 } }"#,
        r#"{ "task": { "logistic": { "dataset": { "csv": { "train": "/nonexistent.csv" } } } }, "optimizer": { "learned": {} } }"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::InvalidConfig(_))), "{bad}");
    }
}

#[test]
fn compare_identical_dirs_gives_identical_columns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = quadratic_sgd("", 20, 3);
    run_experiment(&cfg, &opts(a.path())).unwrap();
    run_experiment(&cfg, &opts(b.path())).unwrap();
    let dirs = [a.path().to_path_buf(), b.path().to_path_buf()];
    let c = compare(&dirs, "train_loss").unwrap();
    assert_eq!(c.rows.len(), 2);
    assert_eq!(c.rows[0].median, c.rows[1].median);
    assert_eq!(c.rows[0].sd, c.rows[1].sd);
    let csv = c.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], lines[2]);
    assert!(c.to_table().contains("97.87"));
    assert!(matches!(compare(&dirs, "accuracy"), Err(Error::UnknownMetric(_))));
    assert!(matches!(compare(&dirs, "test_accuracy"), Err(Error::UnknownMetric(_))));
    assert!(compare(&dirs[..1], "train_loss").is_err());
}
