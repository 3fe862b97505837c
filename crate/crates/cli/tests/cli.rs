use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsemi"))
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env("FEDSEMI_THREADS", "1")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_1_and_names_path() {
    let out = run(&["run", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn unknown_subcommand_and_flag_exit_1() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let out = run(&["run", s(&smoke()), "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"data": {"kind": "mixture"}}"#).unwrap();
    let out = run(&["run", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn strategy_override_reaches_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        s(&smoke()),
        "--strategy",
        "fedavg",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["strategy"], "fedavg");
    assert_eq!(summary["config"]["strategy"], "fedavg");
}

#[test]
fn seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["run", s(&smoke()), "--out-dir", s(&a)])
        .status
        .success());
    assert!(
        run(&["run", s(&smoke()), "--seed", "99", "--out-dir", s(&b)])
            .status
            .success()
    );
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        s(&smoke()),
        "--param",
        "partition.alpha",
        "--values",
        "0.1,0.8,2.0",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dirs: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(dirs.len(), 3);
    for v in ["0.1", "0.8", "2.0"] {
        assert!(dir
            .path()
            .join(format!("partition.alpha={v}/metrics.csv"))
            .exists());
    }
}

#[test]
fn pinned_partition_reproduces_generated_run() {
    let dir = tempfile::tempdir().unwrap();
    let part = dir.path().join("part.json");
    assert!(run(&["partition", s(&smoke()), "--out", s(&part)])
        .status
        .success());

    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(smoke()).unwrap()).unwrap();
    cfg["data"] = serde_json::json!({"kind": "pinned", "path": "part.json"});
    let pinned = dir.path().join("pinned.json");
    std::fs::write(&pinned, cfg.to_string()).unwrap();

    let a = dir.path().join("generated");
    let b = dir.path().join("pinned");
    assert!(run(&["run", s(&smoke()), "--out-dir", s(&a)])
        .status
        .success());
    let out = run(&["run", s(&pinned), "--out-dir", s(&b)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn loo_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["loo", s(&smoke()), "--out-dir", s(dir.path())]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("client_id,data_size,error_full,error_without,delta_error"));
    assert_eq!(stdout.lines().count(), 4);
    assert!(dir.path().join("loo.csv").exists());
    assert!(dir.path().join("full/metrics.csv").exists());
}

#[test]
fn loo_without_enough_unlabeled_clients_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(smoke()).unwrap()).unwrap();
    cfg["partition"]["labeled_client_ids"] = serde_json::json!([0, 1]);
    let path = dir.path().join("two_labeled.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = run(&["loo", s(&path), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}
