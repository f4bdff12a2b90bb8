use std::path::Path;
use std::process::{Command, Output};

fn procua(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_procua")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_tasks_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("suite.json");
    let ok = procua(&["gen-tasks", "--seed", "7", "--count", "16", "--out", p(&out)]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("wrote 16 tasks"));

    let bad = procua(&["gen-tasks", "--count", "0", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(5));
    let usage = procua(&["gen-tasks"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn train_eval_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "iterations = 1\ntasks_per_iteration = 8\ntrain_pool_size = 6\neval_tasks = 6\nn_pages = 8\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = procua(&["--workers", "2", "train", "--config", p(&cfg), "--out", p(&a)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let run = procua(&["train", "--config", p(&cfg), "--method", "fbc", "--out", p(&b)]);
    assert!(run.status.success());

    let ev = procua(&["eval", "--checkpoint", p(&a.join("policy.json")), "--config", p(&cfg)]);
    assert!(ev.status.success());
    assert!(String::from_utf8_lossy(&ev.stdout).contains("on 6 tasks"));

    let cmp = dir.path().join("cmp");
    let c = procua(&["compare", p(&a), p(&b.join("manifest.json")), "--out", p(&cmp)]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    assert!(cmp.join("deployable.tsv").is_file());

    let other = dir.path().join("other");
    let run = procua(&["train", "--config", p(&cfg), "--set", "eval_seed=5", "--out", p(&other)]);
    assert!(run.status.success());
    let c = procua(&["compare", p(&a), p(&other), "--out", p(&cmp)]);
    assert_eq!(c.status.code(), Some(6));
}

#[test]
fn config_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "iteratons = 1\n").unwrap();
    let r = procua(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("iteratons"));

    let r = procua(&["train", "--config", p(&dir.path().join("missing.toml")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(r.status.code(), Some(4));

    let r = procua(&["train", "--print-default-config"]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("tasks_per_iteration = 256"));
}
