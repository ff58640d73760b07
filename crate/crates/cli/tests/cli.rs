use std::path::Path;
use std::process::{Command, Output};

use prunebench_core::data::load_dataset;

const BIN: &str = env!("CARGO_BIN_EXE_prunebench");

fn prunebench(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
            "dataset": {{"synthetic": {{"num_samples": 600, "num_classes": 4, "feature_dim": 6,
                "class_separation": 3.0, "noise_std": 1.0, "label_noise": 0.1, "seed": 2}}}},
            "partition": {{"num_devices": 4}},
            "train": {{"epochs": 4, "batch_size": 8}},
            {extra}
            "pruning": {{"rho": 0.5}}
        }}"#
    );
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_data_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"num_samples": 50, "num_classes": 3, "feature_dim": 4, "class_separation": 2.0, "noise_std": 1.0, "seed": 7}"#,
    )
    .unwrap();
    let out_path = dir.path().join("d.pbds");
    let out = prunebench(&[
        "gen-data",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let data = load_dataset(&out_path).unwrap();
    assert_eq!(data.len(), 50);
    assert!(String::from_utf8_lossy(&out.stdout).contains("50 samples"));

    let unwritable = dir.path().join("missing").join("d.pbds");
    let out = prunebench(&[
        "gen-data",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        unwritable.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(
        &spec,
        r#"{"num_samples": 0, "num_classes": 3, "feature_dim": 4, "class_separation": 2.0, "noise_std": 1.0}"#,
    )
    .unwrap();
    let out = prunebench(&[
        "gen-data",
        "--config",
        spec.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/num_samples"));
}

#[test]
fn run_emits_fleet_and_device_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#""seeds": [0, 1],"#);
    let out_dir = dir.path().join("out");
    let out = prunebench(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    // 3 methods x 2 seeds, each a fleet row plus 4 device rows.
    assert_eq!(rows.len(), 3 * 2 * 5);
    assert_eq!(
        rows.iter()
            .filter(|r| r.split(',').nth(3) == Some("fleet"))
            .count(),
        6
    );
    assert!(out_dir
        .join("traces")
        .join("trace_0_importance_1.csv")
        .exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], 4);
    assert_eq!(manifest["config"]["warmup"]["epochs"], 1);
    assert_eq!(manifest["sweep_rows"], 30);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_override_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = prunebench(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--seed-override",
        "42",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(sweep
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("42")));
}

#[test]
fn oversized_batch_names_the_device() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{"dataset": {"synthetic": {"num_samples": 100, "num_classes": 2, "feature_dim": 2,
            "class_separation": 3.0, "noise_std": 1.0}},
            "partition": {"num_devices": 4, "scheme": "iid"},
            "train": {"batch_size": 64}}"#,
    )
    .unwrap();
    let out = prunebench(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("device 0"), "{}", stderr(&out));
    assert!(stderr(&out).contains("batch size 64"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#""methods": ["importance"], "bogus": 1,"#);
    let out = prunebench(&[
        "run",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
    let missing = prunebench(&[
        "run",
        "--config",
        "/definitely/not/here.json",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn sweep_report_and_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        r#""methods": ["importance", "random"], "seeds": [0, 1, 2],"#,
    );
    let out_dir = dir.path().join("sweep");
    let out = prunebench(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--rhos",
        "0.1,0.2,0.5,0.8,1.0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let fleet_rows = sweep
        .lines()
        .filter(|l| l.split(',').nth(3) == Some("fleet"))
        .count();
    assert_eq!(fleet_rows, 30);
    let gap = std::fs::read_to_string(out_dir.join("gap.csv")).unwrap();
    assert_eq!(gap.lines().count(), 1 + 15);
    assert_eq!(gap.lines().next(), Some("rho,seed,accuracy_gap"));
    for line in gap.lines().skip(1) {
        let g: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(g.is_finite() && g.abs() <= 1.0, "{line}");
    }
    assert!(out_dir
        .join("traces")
        .join("rho_0.5")
        .join("trace_3_random_2.csv")
        .exists());

    let report = prunebench(&["report", "--out", out_dir.to_str().unwrap()]);
    assert!(report.status.success(), "{}", stderr(&report));
    let text = String::from_utf8_lossy(&report.stdout).into_owned();
    assert!(text.contains("linearity: ok"), "{text}");
    let table: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with(|c: char| c.is_ascii_digit()))
        .collect();
    assert_eq!(table.len(), 5 * 2);

    let mut lines: Vec<&str> = sweep.lines().collect();
    lines.remove(7);
    std::fs::write(out_dir.join("sweep.csv"), lines.join("\n") + "\n").unwrap();
    let tampered = prunebench(&["report", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(tampered.status.code(), Some(4));
    assert!(stderr(&tampered).contains("sweep.csv"));
}

#[test]
fn report_ratio_tracks_rho() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#""seeds": [0],"#);
    let out_dir = dir.path().join("o");
    let out = prunebench(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--rhos",
        "0.5,1.0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = prunebench_cli::report::Report::load(&out_dir).unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    for row in report
        .rows
        .iter()
        .filter(|r| r.rho == 0.5 && r.method != prunebench_core::Method::Full)
    {
        let ratio = row.cost_ratio.unwrap();
        assert!((ratio - 0.5).abs() <= row.ratio_slack.unwrap(), "{row:?}");
    }
}

#[test]
fn empty_rho_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = prunebench(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        "/tmp/unused",
        "--rhos",
        "",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = prunebench(&["sweep", "--config", &cfg, "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
}
