use std::fs;

use cflag::datagen::write_csv;
use cflag::experiments::report::report;
use cflag::experiments::{
    avg_accuracy, forgetting, prepare, run_experiment, run_to_dir, AccuracyMatrix, Algorithm, ExperimentConfig,
};
use cflag::Error;
use serde_json::json;

fn base_config(algorithm: &str) -> serde_json::Value {
    json!({
        "schema_version": 1,
        "seed": 7,
        "model": {"kind": "multinomial-logistic", "l2": 0.0},
        "data": {"kind": "split-gaussians", "num_tasks": 2, "classes_per_task": 2, "dim": 4,
                 "n_per_class": 40, "separation": 4.0},
        "partition": {"clients": 3, "zeta": 0.5},
        "algorithm": algorithm,
        "rounds": 8,
        "epochs": 2,
        "alpha": 0.1,
        "beta": 0.1,
        "memory": {"per_task": 10}
    })
}

fn config(v: serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

#[test]
fn metrics_on_a_worked_table() {
    let mut m = AccuracyMatrix::new(3);
    let rows = [[0.9, 0.0, 0.0], [0.7, 0.8, 0.0], [0.6, 0.5, 0.9]];
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate().take(i + 1) {
            m.set(i, j, v).unwrap();
        }
    }
    assert!((avg_accuracy(&m).unwrap() - (0.6 + 0.5 + 0.9) / 3.0).abs() < 1e-15);
    // max drops: task 0 from 0.9 to 0.6, task 1 from 0.8 to 0.5
    assert!((forgetting(&m).unwrap() - 0.3).abs() < 1e-15);
    let back = AccuracyMatrix::from_csv(&m.to_csv()).unwrap();
    assert_eq!(back, m);
    assert!(m.set(0, 1, 0.5).is_err());
    assert!(m.set(1, 0, 1.5).is_err());
    assert!(forgetting(&AccuracyMatrix::new(1)).is_err());
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = config(base_config("cflag-adaptive"));
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    let mut v = base_config("cflag-fixed");
    v["typo"] = json!(1);
    assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    let mut v = base_config("cflag-fixed");
    v["schema_version"] = json!(99);
    assert!(config(v).validate().is_err());
}

#[test]
fn step_size_precondition_is_enforced() {
    let mut v = base_config("cflag-fixed");
    v["alpha"] = json!(0.5);
    let err = prepare(&config(v.clone())).unwrap_err();
    assert!(err.to_string().contains("alpha < 2/(L(1+m))"), "{err}");
    // the bound does not apply without memory
    v["algorithm"] = json!("fedtrack");
    assert!(prepare(&config(v)).is_ok());
}

#[test]
fn fedtrack_equals_fixed_rate_with_zero_alpha() {
    let mut v = base_config("cflag-fixed");
    v["alpha"] = json!(0.0);
    let fixed = run_experiment(&config(v)).unwrap();
    let plain = run_experiment(&config(base_config("fedtrack"))).unwrap();
    assert_eq!(fixed.final_params, plain.final_params);
    assert_eq!(fixed.accuracy, plain.accuracy);
}

#[test]
fn summary_agrees_with_exported_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let art = run_to_dir(&config(base_config("cflag-adaptive")), &run_dir).unwrap();
    let text = fs::read_to_string(run_dir.join("accuracy_matrix.csv")).unwrap();
    let m = AccuracyMatrix::from_csv(&text).unwrap();
    assert_eq!(Some(avg_accuracy(&m).unwrap()), art.summary.avg_accuracy);
    assert_eq!(Some(forgetting(&m).unwrap()), art.summary.forgetting);
    assert_eq!(art.trace.len(), 16);
    let rep = report(&run_dir, &dir.path().join("plots")).unwrap();
    assert_eq!(rep.rounds, 16);
    assert!((rep.avg_accuracy.unwrap() - art.summary.avg_accuracy.unwrap()).abs() < 1e-12);
    for f in ["gamma.dat", "gamma_ad.dat", "grad_g_sq.dat", "avg_accuracy.dat", "report.json"] {
        assert!(dir.path().join("plots").join(f).exists(), "{f}");
    }
}

#[test]
fn task_zero_rounds_report_no_regimes() {
    let art = run_experiment(&config(base_config("cflag-adaptive"))).unwrap();
    for row in &art.trace {
        if row.task == 0 {
            assert_eq!(row.n_transfer + row.n_interfere, 0);
            assert!(row.grad_f_sq.is_none());
        } else {
            assert_eq!(row.n_transfer + row.n_interfere, 3);
            assert!(row.grad_f_sq.is_some());
        }
    }
}

#[test]
fn failed_run_leaves_no_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("diverged");
    let mut v = base_config("fedtrack");
    v["model"] = json!({"kind": "linear-mse"});
    v["data"]["separation"] = json!(50.0);
    v["beta"] = json!(100.0);
    v["rounds"] = json!(200);
    let err = run_to_dir(&config(v), &run_dir).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(!run_dir.exists());
}

#[test]
fn csv_and_permuted_sources_load() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepare(&config(base_config("fedtrack"))).unwrap();
    for (s, d) in prep.train.iter().enumerate() {
        write_csv(&dir.path().join(format!("t{s}.csv")), d).unwrap();
    }
    let mut v = base_config("cflag-fixed");
    v["data"] = json!({"kind": "csv", "tasks": ["t0.csv", "t1.csv"], "num_classes": 4});
    let path = dir.path().join("csv.json");
    fs::write(&path, v.to_string()).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.algorithm, Algorithm::CflagFixed);
    assert!(run_experiment(&cfg).unwrap().summary.avg_accuracy.is_some());

    v["data"] = json!({"kind": "permuted-features", "base_csv": "t0.csv", "num_tasks": 3});
    fs::write(&path, v.to_string()).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    let art = run_experiment(&cfg).unwrap();
    assert_eq!(art.accuracy.unwrap().tasks(), 3);
}
