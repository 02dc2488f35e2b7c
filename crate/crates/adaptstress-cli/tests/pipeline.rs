//! Drives the built binary through whole-pipeline scenarios on a small
//! cohort with reduced model and attribution settings.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(dir: &Path, seed: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "cohort_dir": dir.join("cohort"),
        "output_dir": dir.join("out"),
        "seed": seed,
        "run_id": "itest",
        "n_participants": 4,
        "days_min": 26,
        "days_max": 30,
        "w_in": 3,
        "w_out": 1,
        "sweep_w_in": [3],
        "sweep_w_out": [1, 2],
        "d_model": 8,
        "n_heads": 2,
        "n_layers": 1,
        "d_ff": 8,
        "dropout": 0.1,
        "grl_alpha": 0.05,
        "epochs": 2,
        "patience": 2,
        "warmup_epochs": 1,
        "batch_size": 16,
        "tta_epochs": 2,
        "probe_epochs": 1,
        "n_trees": 15,
        "shap_background": 8,
        "shap_explained": 2,
        "shap_coalitions": 30,
        "uncertainty_passes": 3
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptstress"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(config: &Path, args: &[&str]) {
    let out = run(config, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn embedded_hash(path: &Path) -> String {
    let value: serde_json::Value = serde_json::from_str(&read(path)).unwrap();
    value["manifest_hash"].as_str().unwrap().to_string()
}

fn trailing_stamp(path: &Path) -> String {
    read(path)
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix("# manifest_hash=").map(str::to_string))
        .unwrap_or_else(|| panic!("{} has no stamp", path.display()))
}

#[test]
fn pipeline_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 11);
    let cohort = dir.path().join("cohort");
    let out = dir.path().join("out");

    run_ok(&config, &["generate"]);
    for p in ["P01", "P02", "P03", "P04"] {
        assert!(cohort.join(format!("{p}.csv")).exists());
    }
    assert!(cohort.join("ground_truth.json").exists());
    assert!(cohort.join("manifest.json").exists());

    run_ok(&config, &["preprocess"]);
    assert!(out.join("quality_report.json").exists());
    assert!(out.join("cleaned").join("P01.csv").exists());

    run_ok(&config, &["select-features"]);
    let selection: serde_json::Value =
        serde_json::from_str(&read(&out.join("selection.json"))).unwrap();
    let kept = selection["kept"].as_array().unwrap();
    assert!(!kept.is_empty() && kept.len() <= 15);

    run_ok(&config, &["train"]);
    assert!(out.join("train_record.json").exists());
    assert!(out.join("model.ckpt").exists());

    run_ok(&config, &["evaluate"]);
    let eval_hash = embedded_hash(&out.join("evaluation.json"));
    for fold in 0..4 {
        assert_eq!(embedded_hash(&out.join(format!("fold_{fold}.json"))), eval_hash);
    }
    assert_eq!(trailing_stamp(&out.join("tta_history.jsonl")), eval_hash);

    run_ok(&config, &["explain"]);
    assert_eq!(
        embedded_hash(&out.join("shap_summary.json")),
        eval_hash,
        "stages of one setup share a stamp"
    );
    for p in ["P01", "P02", "P03", "P04"] {
        assert_eq!(trailing_stamp(&out.join(format!("shap_{p}.csv"))), eval_hash);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&read(&out.join("shap_summary.json"))).unwrap();
    assert_eq!(summary["participants"].as_array().unwrap().len(), 4);

    run_ok(&config, &["report"]);
    let report = read(&out.join("report.csv"));
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "participant,model_variant,mse,mae,rmse,pearson_r,tda"
    );
    let data_rows: Vec<&str> = report
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .collect();
    assert_eq!(data_rows.len(), 4 * 5, "4 participants x 5 variants");
    assert!(data_rows.iter().any(|l| l.starts_with("P03,ADAPT_STRESS,")));
    assert!(data_rows.iter().any(|l| l.contains(",PERSISTENCE,")));

    let manifest: serde_json::Value =
        serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "report");
    assert!(manifest["input_hashes"]
        .as_object()
        .unwrap()
        .contains_key("evaluation.json"));
}

#[test]
fn evaluate_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 23);
    let out = dir.path().join("out");
    run_ok(&config, &["generate"]);

    run_ok(&config, &["evaluate"]);
    let first: Vec<(PathBuf, String)> = ["evaluation.json", "fold_0.json", "tta_history.jsonl"]
        .iter()
        .map(|n| (out.join(n), read(&out.join(n))))
        .collect();

    run_ok(&config, &["evaluate"]);
    for (path, before) in &first {
        assert_eq!(&read(path), before, "{} changed across reruns", path.display());
    }
}

#[test]
fn report_refuses_mixed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 31);
    let out = dir.path().join("out");
    run_ok(&config, &["generate"]);
    run_ok(&config, &["evaluate"]);
    run_ok(&config, &["report"]);

    // Simulate a stale fold file from some other run.
    let fold = out.join("fold_1.json");
    let doctored = read(&fold).replacen(&embedded_hash(&fold), &"0".repeat(64), 1);
    std::fs::write(&fold, doctored).unwrap();

    let result = run(&config, &["report"]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    let last = stderr.lines().last().unwrap();
    let record: serde_json::Value = serde_json::from_str(last).expect("machine-readable error");
    assert_eq!(record["kind"], "schema");
    assert!(record["error"].as_str().unwrap().contains("different runs"));
}

#[test]
fn flags_override_config_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 47);
    let other = dir.path().join("alt-cohort");
    run_ok(
        &config,
        &["--seed", "48", "--cohort-dir", other.to_str().unwrap(), "generate"],
    );
    assert!(other.join("P01.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&other.join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["seed"], 48);
    let overrides: Vec<&str> = manifest["overrides"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(overrides.contains(&"seed=48"));
    assert!(overrides.iter().any(|o| o.starts_with("cohort_dir=")));
}

#[test]
fn conflicting_tta_flags_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 53);
    let out = run(&config, &["--no-tta", "--force-tta", "evaluate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cannot be used with"), "stderr: {stderr}");
}

#[test]
fn missing_cohort_yields_machine_readable_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 59);
    let out = run(&config, &["evaluate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let record: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(record["kind"], "io");
}
