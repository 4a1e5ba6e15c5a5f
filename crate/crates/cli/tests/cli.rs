use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn graphcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphcorr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Tiny synthetic dataset plus an experiment config pointing at it.
fn fixture(dir: &Path) -> PathBuf {
    write(
        &dir.join("synth.json"),
        r#"{
  "nodes": 6, "frames": 60, "subjects_per_class": 13,
  "pairs": [[0, 1]], "lag_a": 2, "lag_b": -2, "coupling": 0.6,
  "noise_std": 1.0, "seed": 3
}"#,
    );
    let out = graphcorr(&["synth", "--config", dir.join("synth.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("synth/manifest.json").exists());

    let cfg = dir.join("exp.json");
    write(
        &cfg,
        r#"{
  "manifest": "synth/manifest.json", "model": "gcn", "input_mode": "graphcorr",
  "window_size": 20, "stride": 10, "max_lag": 2, "filters": 2,
  "embed_dim": 3, "heads": 2, "edge_percent": 30, "epochs": 2, "seed": 5
}"#,
    );
    cfg
}

#[test]
fn train_eval_is_reproducible_and_explainable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = graphcorr(&["train-eval", "--config", cfg, "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["results.csv", "predictions_graphcorr.csv", "predictions_vanilla.csv", "resolved_config.json"] {
        let x = std::fs::read(a.join(file)).unwrap();
        assert_eq!(x, std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let results = std::fs::read_to_string(a.join("results.csv")).unwrap();
    assert!(results.starts_with("model,variant,fold,accuracy,roc_auc\n"));
    assert_eq!(results.lines().count(), 11);

    // A run from the resolved snapshot reproduces the results.
    let snapshot = a.join("resolved_config.json");
    let c = tmp.path().join("c");
    let out = graphcorr(&["train-eval", "--config", snapshot.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(results, std::fs::read_to_string(c.join("results.csv")).unwrap());

    let ckpt = a.join("checkpoints/graphcorr_fold0.ckpt");
    let e = tmp.path().join("e");
    let out = graphcorr(&[
        "explain",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--subjects",
        "sub-0000,sub-0001",
        "--out",
        e.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("sub-0000") && stdout.contains("most salient window"));
    for file in ["sub-0000_roi.csv", "sub-0000_roi.svg", "sub-0001_window.csv", "logistic_weights.csv"] {
        assert!(e.join(file).exists(), "{file}");
    }
}

#[test]
fn unknown_key_exits_with_configuration_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    write(&cfg, "{\"manifest\": \"m.json\", \"model\": \"gcn\",\n \"input_mode\": \"graphcorr\", \"strid\": 3}");
    let out = graphcorr(&["train-eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("strid") && err.contains("line 2"), "{err}");
}

#[test]
fn invalid_window_settings_exit_with_configuration_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"window_size\": 20", "\"window_size\": 60");
    write(&cfg, &text);
    let out = graphcorr(&["train-eval", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frames"));
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.json");
    write(&cfg, r#"{"manifest": "nowhere/manifest.json", "model": "sage", "input_mode": "static_fc"}"#);
    let out = graphcorr(&["train-eval", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn constant_signal_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path());
    let subject = tmp.path().join("synth/subjects/sub-0003.csv");
    let text = std::fs::read_to_string(&subject).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // Node 2 becomes a constant signal.
    let cols = lines[0].split(',').count();
    lines[2] = vec!["0.5"; cols].join(",");
    write(&subject, &(lines.join("\n") + "\n"));
    let out = graphcorr(&["train-eval", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("node 2"));
}
