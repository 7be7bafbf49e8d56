use std::path::Path;
use std::process::{Command, Output};

fn mambar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mambar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL_RUN: &str = r#"{
  "model": {"depth": 1, "d": 16, "n": 2, "r": 2, "patch": 8, "img": 16, "N": 4, "num_classes": 2},
  "train": {"epochs": 2, "batch": 4, "warmup_epochs": 1, "checkpoint_interval": 1},
  "train_data": {"seed": 3, "num_classes": 2, "per_class": 6, "side": 16, "channels": 3, "kind": "shapes"},
  "val_data": {"seed": 4, "num_classes": 2, "per_class": 4, "side": 16, "channels": 3, "kind": "shapes"}
}"#;

fn write_small_config(dir: &Path) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, SMALL_RUN).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn layout_prints_golden_patterns() {
    for (mode, want) in [
        ("even", "I I R I I R I I"),
        ("head", "R R I I I I I I"),
        ("middle", "I I I R R I I I"),
    ] {
        let o = mambar(&["layout", "--m", "6", "--n", "2", "--mode", mode]);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(stdout(&o).trim(), want);
    }
    let o = mambar(&["layout", "--m", "196", "--n", "12"]);
    let line = stdout(&o);
    assert_eq!(line.split_whitespace().filter(|t| *t == "R").count(), 12);
    assert_eq!(line.split_whitespace().filter(|t| *t == "I").count(), 196);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(mambar(&["layout", "--m", "6", "--n", "2", "--bogus"]).status.code(), Some(2));
    assert_eq!(mambar(&["layout", "--m", "6", "--n", "2", "--mode", "corner"]).status.code(), Some(2));
    assert_eq!(mambar(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mambar(&[]).status.code(), Some(2));
    assert_eq!(mambar(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = mambar(&["eval", "--out", out.to_str().unwrap(), "--checkpoint", "missing.mbrt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.mbrt"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"depth": 1}}"#).unwrap();
    let o = mambar(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_scan_rows_are_ordered_and_accurate() {
    let dir = tempfile::tempdir().unwrap();
    let o = mambar(&["bench-scan", "--max-log2", "11", "--reps", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("L,sequential_us,parallel_us,max_rel_err"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(w[1][0] > w[0][0]);
    }
    assert_eq!(rows[0][0], 256.0);
    assert!(rows.iter().all(|r| r[3] <= 1e-5), "{rows:?}");
    assert!(dir.path().join("manifest.json").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("bench_scan.csv")).unwrap(), text);
}

#[test]
fn train_run_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let first = dir.path().join("first");
    let o = mambar(&["train", "--config", &config, "--out", first.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["model"]["seed"], 5);
    assert_eq!(manifest["config"]["model"]["N"], 4);
    assert_eq!(manifest["config"]["train"]["epochs"], 2);

    let second = dir.path().join("second");
    let manifest_path = first.join("manifest.json");
    let o = mambar(&["train", "--config", manifest_path.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["metrics.csv", "ckpt_1.mbrt", "ckpt_2.mbrt"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }

    // Resuming after epoch 1 reproduces the epoch-2 checkpoint.
    let third = dir.path().join("third");
    let ckpt1 = first.join("ckpt_1.mbrt");
    let o = mambar(&[
        "train", "--config", manifest_path.to_str().unwrap(), "--out", third.to_str().unwrap(),
        "--resume", ckpt1.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(first.join("ckpt_2.mbrt")).unwrap(), std::fs::read(third.join("ckpt_2.mbrt")).unwrap());

    let eval_out = dir.path().join("eval");
    let ckpt2 = first.join("ckpt_2.mbrt");
    let o = mambar(&[
        "eval", "--config", manifest_path.to_str().unwrap(), "--out", eval_out.to_str().unwrap(),
        "--checkpoint", ckpt2.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("eval.json")).unwrap()).unwrap();
    let metrics = std::fs::read_to_string(first.join("metrics.csv")).unwrap();
    let logged_val: f64 = metrics.lines().last().unwrap().split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(eval["accuracy"].as_f64().unwrap(), logged_val);
    assert!(eval_out.join("manifest.json").exists());
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let out = dir.path().join("analysis");
    let o = mambar(&[
        "analyze", "--config", &config, "--out", out.to_str().unwrap(), "--images", "3",
        "--probe-steps", "20", "--tap", "pre-norm",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "manifest.json", "trace.mbrt", "norms.csv", "layers.csv", "histogram.csv", "outliers.csv",
        "probe.csv", "norm_map_layer0.pgm", "distance_map.pgm",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let norms = std::fs::read_to_string(out.join("norms.csv")).unwrap();
    assert_eq!(norms.lines().count(), 1 + 4);
    let pgm = std::fs::read(out.join("norm_map_layer0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
    let probe = std::fs::read_to_string(out.join("probe.csv")).unwrap();
    assert!(probe.contains("mean_registers"));
}
