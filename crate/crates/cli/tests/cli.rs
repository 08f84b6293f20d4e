use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_medgraph"));
    cmd.env_remove("MEDGRAPH_SEED").env_remove("RUST_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn medgraph")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf8")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf8 path")
}

fn snapshot(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(name)
}

fn check_snapshot(name: &str, actual: &str) {
    let path = snapshot(name);
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_default();
    assert_eq!(actual, want, "help text for {name} changed; rerun with UPDATE_SNAPSHOTS=1 to accept");
}

#[test]
fn help_text_snapshots() {
    check_snapshot("help.txt", &ok(&["--help"]));
    for sub in ["generate", "train", "eval", "export", "report", "stats"] {
        check_snapshot(&format!("help_{sub}.txt"), &ok(&[sub, "--help"]));
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.mgck");
    // gamma > 0 without a task is rejected before the data is read.
    let r = run(&["train", "--data", "/nonexistent", "--gamma", "1", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("task"));
    let r = run(&["train", "--data", "/nonexistent", "--no-structure", "--alpha", "1", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(run(&["stats", "--data", "/nonexistent"]).status.code(), Some(1));
    assert_eq!(run(&["generate", "--classes", "0", "--out", p(dir.path())]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--patients", "10", "--codes", "20", "--classes", "2", "--out", p(dir.path())]);
    let ckpt = dir.path().join("broken.mgck");
    std::fs::write(&ckpt, b"MGCK\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(run(&["eval", "--ckpt", p(&ckpt), "--data", p(dir.path()), "--task", "readmit30"]).status.code(), Some(2));
}

#[test]
fn generate_writes_files_and_honours_seed_fallback() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = ok(&["generate", "--patients", "40", "--codes", "30", "--classes", "3", "--seed", "7", "--out", p(a.path()), "--json"]);
    let manifest: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(manifest["stats"]["patients"], 40);
    assert_eq!(manifest["config"]["seed"], 7);
    for f in ["patients.jsonl", "codes.jsonl", "manifest.json"] {
        assert!(a.path().join(f).is_file(), "{f}");
    }
    let env = bin().args(["generate", "--patients", "40", "--codes", "30", "--classes", "3", "--out", p(b.path())]).env("MEDGRAPH_SEED", "7").output().unwrap();
    assert!(env.status.success());
    ok(&["generate", "--patients", "40", "--codes", "30", "--classes", "3", "--seed", "8", "--out", p(c.path())]);
    let read = |d: &Path| std::fs::read(d.join("patients.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn config_file_mirrors_train_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--patients", "20", "--codes", "20", "--classes", "2", "--out", p(&data)]);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"embed_dim": 4, "hidden_dim": 6, "rnn_dim": 4, "epochs": 2, "gamma": 0.0, "cell": "plain"}"#).unwrap();
    let ckpt = dir.path().join("m.mgck");
    let out = ok(&["train", "--data", p(&data), "--config", p(&cfg), "--epochs", "1", "--out", p(&ckpt), "--json"]);
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["epochs"], 1);
    std::fs::write(&cfg, r#"{"embed_dim": "wide"}"#).unwrap();
    assert_eq!(run(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt)]).status.code(), Some(1));
}

#[test]
fn pipeline_generate_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--patients", "60", "--codes", "40", "--classes", "4", "--seed", "3", "--out", p(&data)]);
    let stats: serde_json::Value = serde_json::from_str(&ok(&["stats", "--data", p(&data), "--json"])).unwrap();
    assert_eq!(stats["patients"], 60);

    let small = ["--embed-dim", "8", "--hidden-dim", "16", "--rnn-dim", "8", "--epochs", "3", "--seed", "3", "--holdout", "0.3"];
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--data", p(&data), "--task", "readmit30", "--alpha", "1", "--gamma", "1", "--out", p(out)];
        args.extend_from_slice(&small);
        args.extend_from_slice(extra);
        ok(&args);
    };
    let (full, again, no_t, workers) = (dir.path().join("full.mgck"), dir.path().join("again.mgck"), dir.path().join("no_t.mgck"), dir.path().join("w.mgck"));
    train(&full, &["--beta", "1"]);
    train(&again, &["--beta", "1"]);
    train(&no_t, &["--no-temporal"]);
    train(&workers, &["--beta", "1", "--workers", "2"]);
    let bytes = std::fs::read(&full).unwrap();
    assert_eq!(bytes, std::fs::read(&again).unwrap());
    assert_eq!(bytes, std::fs::read(&workers).unwrap());
    assert_ne!(bytes, std::fs::read(&no_t).unwrap());

    let metric: serde_json::Value = serde_json::from_str(&ok(&["eval", "--ckpt", p(&full), "--data", p(&data), "--holdout", "0.3", "--json"])).unwrap();
    let auc = metric["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(metric["task"], "readmit30");

    let emb = dir.path().join("emb.tsv");
    let proj = dir.path().join("proj.csv");
    ok(&["export", "--ckpt", p(&full), "--data", p(&data), "--out", p(&emb), "--projection", p(&proj)]);
    assert!(std::fs::read_to_string(&emb).unwrap().starts_with("node_id\tkind\tmu_0"));
    assert!(std::fs::read_to_string(&proj).unwrap().starts_with("kind,node_id,class,pc1,pc2\n"));

    let rep = |out: &Path| {
        let full_arg = format!("full={}", p(&full));
        let no_t_arg = format!("no_temporal={}", p(&no_t));
        ok(&["report", "--model", &full_arg, "--model", &no_t_arg, "--data", p(&data), "--holdout", "0.3", "--out", p(out), "--json"])
    };
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let json: serde_json::Value = serde_json::from_str(&rep(&r1)).unwrap();
    rep(&r2);
    assert_eq!(json["results"].as_array().unwrap().len(), 2);
    assert_eq!(json["results"][0]["metrics"][0]["auc"].as_f64().unwrap(), auc);
    for f in ["report.json", "auc.csv", "probe_f1.csv", "uncertainty_buckets.csv", "uncertainty_scatter_full.csv", "projection_no_temporal.csv"] {
        assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(r1.join("auc.csv")).unwrap().lines().count(), 3);
}

#[test]
fn human_output_without_json() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--patients", "12", "--codes", "15", "--classes", "3", "--out", p(dir.path())]);
    let text = ok(&["stats", "--data", p(dir.path())]);
    assert!(text.starts_with("patients 12\n"));
    assert!(serde_json::from_str::<serde_json::Value>(&text).is_err());
}
