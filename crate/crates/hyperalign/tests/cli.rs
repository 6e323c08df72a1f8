use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperalign::config::load_config;
use hyperalign::sweep::Grid;
use hyperalign_core::model::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyperalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// A fast config: few steps, small batches.
fn small_config(dir: &Path) -> PathBuf {
    let cfg = RunConfig {
        steps: 6,
        batch_size: 8,
        ..RunConfig::desk()
    };
    let path = dir.join("small.json");
    fs::write(&path, hyperalign::config::config_json(&cfg)).unwrap();
    path
}

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    ok(&["gen-data", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&path)]);
    path
}

fn first_id(corpus: &Path) -> String {
    let text = fs::read_to_string(corpus).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    v["id"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = fs::read(gen(dir.path(), "a.jsonl", 20, 3)).unwrap();
    let b = fs::read(gen(dir.path(), "b.jsonl", 20, 3)).unwrap();
    let c = fs::read(gen(dir.path(), "c.jsonl", 20, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.iter().filter(|&&x| x == b'\n').count(), 20);
}

#[test]
fn train_eval_and_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let train = gen(d, "train.jsonl", 48, 1);
    let test = gen(d, "test.jsonl", 16, 2);
    let ck = d.join("ck.json");
    let curve = d.join("curve.json");
    ok(&["train", "--config", p(&cfg), "--corpus", p(&train), "--out-checkpoint", p(&ck), "--out-curve", p(&curve)]);
    let metrics = d.join("metrics.json");
    ok(&[
        "eval", "--checkpoint", p(&ck), "--train-corpus", p(&train), "--test-corpus", p(&test),
        "--curve", p(&curve), "--out", p(&metrics),
    ]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["n_queries"], 16);
    assert_eq!(m["loss_curve"].as_array().unwrap().len(), 6);

    let id = first_id(&train);
    let out = ok(&["retrieve", "--checkpoint", p(&ck), "--corpus", p(&train), "--query-id", &id, "--k", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with(&format!("1\t{id}\t")), "{text}");

    let index = d.join("index.json");
    ok(&["index", "--checkpoint", p(&ck), "--corpus", p(&train), "--out", p(&index)]);
    let via_index = ok(&["retrieve", "--index", p(&index), "--corpus", p(&train), "--query-id", &id, "--k", "3"]);
    assert_eq!(String::from_utf8(via_index.stdout).unwrap(), text);
}

#[test]
fn usage_and_input_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let corpus = gen(d, "c.jsonl", 20, 1);
    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"curvature": -1.0}"#).unwrap();
    let out = run(&["train", "--config", p(&bad), "--corpus", p(&corpus), "--out-checkpoint", p(&d.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    fs::write(&bad, r#"{"learning_rate": 0.1}"#).unwrap();
    let out = run(&["train", "--config", p(&bad), "--corpus", p(&corpus), "--out-checkpoint", p(&d.join("x"))]);
    assert_eq!(out.status.code(), Some(1));

    let missing = d.join("missing.jsonl");
    let out = run(&["train", "--corpus", p(&missing), "--out-checkpoint", p(&d.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("x").exists());

    let out = run(&["retrieve", "--corpus", p(&corpus), "--query-id", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_path() {
    let out = ok(&["gradcheck", "--points", "3", "--seed", "9"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.ends_with("PASS")), "{text}");
    let one = ok(&["gradcheck", "--target", "fcc", "--points", "2"]);
    assert!(String::from_utf8(one.stdout).unwrap().starts_with("fcc"));
}

#[test]
fn shipped_configs_parse() {
    assert_eq!(load_config(&repo_file("configs/desk.json")).unwrap(), RunConfig::desk());
    let paper = load_config(&repo_file("configs/paper.json")).unwrap();
    assert_eq!((paper.alpha, paper.beta), (2.0, 0.5));
    let base = RunConfig::desk();
    for (name, cells) in [("configs/ablation-grid.json", 6), ("configs/alpha-grid.json", 5)] {
        let grid: Grid = serde_json::from_str(&fs::read_to_string(repo_file(name)).unwrap()).unwrap();
        assert_eq!(grid.cells(&base).unwrap().len(), cells, "{name}");
    }
}

#[test]
fn sweep_cells_match_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let train = gen(d, "train.jsonl", 48, 1);
    let test = gen(d, "test.jsonl", 16, 2);
    let grid = d.join("grid.json");
    fs::write(&grid, r#"{"alpha": [2.0, 0.0]}"#).unwrap();
    let out_dir = d.join("sweep");
    ok(&[
        "sweep", "--config", p(&cfg), "--grid", p(&grid), "--out-dir", p(&out_dir),
        "--train-corpus", p(&train), "--test-corpus", p(&test),
    ]);
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(out_dir.join("summary.txt").exists());

    let ck = d.join("ck.json");
    ok(&["train", "--config", p(&cfg), "--corpus", p(&train), "--out-checkpoint", p(&ck)]);
    let out = ok(&["eval", "--checkpoint", p(&ck), "--train-corpus", p(&train), "--test-corpus", p(&test)]);
    let single: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let cells: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("sweep.json")).unwrap()).unwrap();
    let first = &cells[0]["report"];
    assert_eq!(first["p_at_1"], single["p_at_1"]);
    assert_eq!(first["mean_retrieved_hamming"], single["mean_retrieved_hamming"]);
}
