use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coal")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = coal(args);
    assert!(
        out.status.success(),
        "coal {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// The pinned fixture shrunk to a few seconds of training.
fn small_config(dir: &Path, method: &str) -> PathBuf {
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/twin-rsut.toml");
    let text = std::fs::read_to_string(fixture)
        .unwrap()
        .replace("method = \"coal\"", &format!("method = \"{method}\""))
        .replace("source_budget = 2000", "source_budget = 400")
        .replace("target_budget = 2000", "target_budget = 400")
        .replace("epochs = 30", "epochs = 3")
        .replace("pretrain_epochs = 10", "pretrain_epochs = 2");
    let path = dir.join(format!("{method}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_shift_writes_counts_matching_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shift");
    let stdout = ok(&[
        "gen-shift",
        "--input",
        "synthetic:classes=2,per_class=200",
        "--degree",
        "100",
        "--budget",
        "100",
        "--direction",
        "ut",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("[80, 20]"), "{stdout}");
    let manifest = json(&out.join("shifted.manifest.json"));
    assert_eq!(manifest["per_class_counts"], serde_json::json!([80, 20]));
    assert_eq!(manifest["num_samples"], 100);

    // Shift the CSV we just wrote the other way; its hash lands in the manifest.
    let csv = out.join("shifted.csv");
    let again = dir.path().join("again");
    ok(&[
        "gen-shift", "--input", s(&csv), "--degree", "0", "--budget", "40", "--direction", "rs", "--out", s(&again),
    ]);
    let manifest = json(&again.join("shifted.manifest.json"));
    assert_eq!(manifest["per_class_counts"], serde_json::json!([20, 20]));
    let hashes = manifest["source_hashes"].as_object().unwrap();
    assert!(hashes.contains_key(s(&csv)), "{hashes:?}");
    assert!(hashes.contains_key("shifted.csv"), "{hashes:?}");
}

#[test]
fn gen_shift_reports_an_impossible_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = coal(&[
        "gen-shift",
        "--input",
        "synthetic:classes=2,per_class=10",
        "--degree",
        "100",
        "--budget",
        "100",
        "--direction",
        "ut",
        "--out",
        s(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_eval_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "coal");
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(stdout.contains("per-class mean accuracy"), "{stdout}");
    for file in [
        "report.json",
        "metrics.jsonl",
        "checkpoint.json",
        "config.toml",
        "data/source.csv",
        "data/source.manifest.json",
        "data/target-train.manifest.json",
        "data/target-holdout.csv",
        "data/target-holdout.manifest.json",
    ] {
        assert!(run.join(file).is_file(), "missing {file}");
    }
    let report = json(&run.join("report.json"));
    assert_eq!(report["metrics"]["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(report["timing"]["epoch_seconds"].as_array().unwrap().len(), 3);
    let steps = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(steps.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let eval_dir = dir.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--data",
        s(&run.join("data/target-holdout.manifest.json")),
        "--out",
        s(&eval_dir),
    ]);
    let reported = report["metrics"]["summary"]["per_class_mean_accuracy"].as_f64().unwrap();
    assert!(stdout.contains(&format!("per-class mean accuracy: {reported:.4}")), "{stdout}");
    let confusion = std::fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 5);
    let features = std::fs::read_to_string(eval_dir.join("features_2d.csv")).unwrap();
    assert_eq!(features.lines().next().unwrap(), "sample_id,label,predicted,pc1,pc2");

    let so_cfg = small_config(dir.path(), "source-only");
    ok(&["train", "--config", s(&so_cfg), "--out", s(&dir.path().join("so"))]);
    let pattern = format!("{}/*/report.json", dir.path().display());
    let table = ok(&["report", "--glob", &pattern, "--format", "csv"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert_eq!(lines[0], "method,twin-rsut d=100");
    assert!(lines[1].starts_with("coal,"));
    assert!(lines[2].starts_with("source-only,"));
}

#[test]
fn repeated_training_reproduces_the_metrics_section() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "marginal-align");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    let metrics = |p: &Path| serde_json::to_string(&json(&p.join("report.json"))["metrics"]).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(
        std::fs::read(a.join("checkpoint.json")).unwrap(),
        std::fs::read(b.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn sweep_and_ablate_write_one_run_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "coal");
    let sweep = dir.path().join("sweep");
    let table = ok(&["sweep", "--config", s(&cfg), "--degrees", "0,100", "--out", s(&sweep)]);
    assert!(sweep.join("d0/report.json").is_file() && sweep.join("d100/report.json").is_file());
    assert!(table.contains("twin-rsut d=0 | twin-rsut d=100"), "{table}");

    let ablate = dir.path().join("ablate");
    let table = ok(&["ablate", "--config", s(&cfg), "--out", s(&ablate)]);
    let runs = std::fs::read_dir(&ablate).unwrap().count();
    assert_eq!(runs, 3);
    assert!(table.contains("w/o pseudo") && table.contains("w/o entropy"), "{table}");
}

#[test]
fn bad_config_fails_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nno_such_key = 1\n").unwrap();
    let out = coal(&["train", "--config", s(&path)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml"), "{err}");
}
