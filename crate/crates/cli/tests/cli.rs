//! End-to-end runs of the `dialkg` binary on the bundled toy corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dialkg::config::RunConfig;
use dialkg::train::Dataset;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dialkg"))
        .args(args)
        .env_remove("DIALKG_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The shipped toy config shortened to `epochs` epochs, written into `dir`.
fn short_config(dir: &Path, epochs: usize) -> PathBuf {
    let text = fs::read_to_string(root().join("configs/toy.toml"))
        .unwrap()
        .replace("epochs = 60", &format!("epochs = {epochs}"))
        .replace("../data/toy", &root().join("data/toy").display().to_string());
    let path = dir.join("short.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_toy_data_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate-toy", "--seed", "0", "--out", s(dir.path())]);
    for f in ["train.jsonl", "test.jsonl", "ontology.json"] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(root().join("data/toy").join(f)).unwrap(),
            "{f} differs from the generator output"
        );
    }
    assert!(dir.path().join("generate-toy.manifest.json").exists());
}

#[test]
fn train_eval_infer_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 2);
    let run = dir.path().join("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(stdout.contains("best epoch"));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(run.join("train.log.jsonl")).unwrap().lines().count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("train.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["train"]["epochs"], 2);
    assert!(manifest["code_version"].as_str().unwrap().starts_with("dialkg "));
    RunConfig::from_toml(&fs::read_to_string(run.join("train.config.toml")).unwrap()).unwrap();

    let (e1, e2) = (dir.path().join("eval1"), dir.path().join("eval2"));
    for e in [&e1, &e2] {
        let text = ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--split", "test", "--out", s(e)]);
        assert!(text.contains("BLEU"));
    }
    for f in ["report.json", "responses.jsonl"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["responses"], 10);

    let infer = dir.path().join("out/infer.jsonl");
    ok(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&infer)]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&infer)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[0]["dialogue"], "toy-1-0");
    assert!(dir.path().join("out/infer.manifest.json").exists());

    let dump = dir.path().join("inspect.json");
    let table = ok(&[
        "inspect", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--dialogue", "toy-1-0", "--turn", "1", "--out",
        s(&dump),
    ]);
    assert!(table.starts_with("dialogue toy-1-0 turn 1"));
    let dumps: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(dumps.as_array().unwrap().len(), 1);
    assert_eq!(dumps[0]["nodes"].as_array().unwrap().len(), 12);

    let missing = bin(&["inspect", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--dialogue", "nope"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 0);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--seed", "9", "--hops", "2", "--hidden", "4", "--out", s(&run)]);
    let snapshot = RunConfig::from_toml(&fs::read_to_string(run.join("train.config.toml")).unwrap()).unwrap();
    assert_eq!((snapshot.seed, snapshot.model.hops, snapshot.model.hidden, snapshot.model.entity_dim), (9, 2, 4, 8));
}

#[test]
fn graph_stats_on_toy_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("stats.json");
    let text = ok(&["graph-stats", "--config", s(&root().join("configs/toy.toml")), "--out", s(&out)]);
    assert!(text.contains("=1") && text.contains("total"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let shares: f64 = report["percentages"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((shares - 100.0).abs() < 1e-9);
    assert!(dir.path().join("graph-stats.manifest.json").exists());
}

#[test]
fn grid_writes_loadable_configs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let text = ok(&[
        "grid", "--config", s(&root().join("configs/toy.toml")), "--hops", "1,2", "--lr", "0.001,0.005", "--out", s(&out),
    ]);
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let cfg = RunConfig::load(Path::new(line), None).unwrap();
        assert!([1, 2].contains(&cfg.model.hops));
        Dataset::load(&cfg.data).unwrap();
    }
    assert!(out.join("grid.manifest.json").exists());
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, fs::read_to_string(root().join("configs/toy.toml")).unwrap().replace("hops = 3", "hops = 0")).unwrap();
    let out = bin(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
