use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use caseq::model::{load_checkpoint, save_checkpoint};
use caseq::train::init_params;

const SPEC: &str = "contexts = 2\nevent_types = 6\nlambda_inv = 0.5\nlengths = { min = 6, max = 14 }\n\n[generate]\nseed = 3\nhorizon = 14\n";

const RUN: &str = r#"
[model]
dim = 4
units = 2
layers = 2
tau = 1.0
backbone = "gru"
routing = "gumbel"
baseline = "none"

[train]
epochs = 2
batch_size = 8
lr = 0.01
"#;

fn caseq<A: AsRef<std::ffi::OsStr>>(args: &[A]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caseq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("spec.toml"), SPEC).unwrap();
        std::fs::write(ws.path("run.toml"), RUN).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn simulate(&self, n: &str, seed: &str, out: &str) -> Output {
        caseq(&["simulate", "--spec", s(&self.path("spec.toml")), "--n", n, "--seed", seed, "--out", s(&self.path(out))])
    }

    fn train(&self, config: &str, out: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = ["--threads", "1", "train", "--gap-max", "2", "--seed", "4"]
            .map(String::from)
            .to_vec();
        for (flag, path) in [("--data", "data.txt"), ("--config", config), ("--out", out), ("--log", "log.csv")] {
            args.push(flag.into());
            args.push(s(&self.path(path)).into());
        }
        args.extend(extra.iter().map(|e| e.to_string()));
        caseq(&args)
    }

    fn trained(&self) -> PathBuf {
        assert!(self.simulate("40", "1", "data.txt").status.success());
        assert!(self.train("run.toml", "model.ckpt", &[]).status.success());
        self.path("model.ckpt")
    }
}

#[test]
fn version_names_checkpoint_format() {
    let out = caseq(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("checkpoint format 1"));
}

#[test]
fn simulate_writes_n_sequences_and_is_deterministic() {
    let ws = Workspace::new();
    assert!(ws.simulate("100", "9", "a.txt").status.success());
    assert!(ws.simulate("100", "9", "b.txt").status.success());
    let a = std::fs::read_to_string(ws.path("a.txt")).unwrap();
    assert_eq!(a.lines().count(), 100);
    assert_eq!(a, std::fs::read_to_string(ws.path("b.txt")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("a.txt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seeds"][0], 9);
}

#[test]
fn simulate_writes_labels() {
    let ws = Workspace::new();
    let out = caseq(&[
        "simulate",
        "--spec",
        s(&ws.path("spec.toml")),
        "--n",
        "5",
        "--out",
        s(&ws.path("d.txt")),
        "--labels",
        s(&ws.path("l.csv")),
        "--lengths",
        "7",
    ]);
    assert!(out.status.success());
    let labels = std::fs::read_to_string(ws.path("l.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 5 * 7);
    assert!(labels.lines().skip(1).all(|l| matches!(l.rsplit(',').next(), Some("1" | "2"))));
}

#[test]
fn malformed_spec_exits_2_naming_key() {
    let ws = Workspace::new();
    std::fs::write(ws.path("spec.toml"), SPEC.replace("lambda_inv", "lambda_invv")).unwrap();
    let out = ws.simulate("10", "0", "d.txt");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_invv"));
}

#[test]
fn missing_input_exits_1() {
    let ws = Workspace::new();
    let out = caseq(&["split", "--data", s(&ws.path("nope.txt")), "--gap-max", "1", "--out", s(&ws.path("s.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn split_summary_lists_every_target() {
    let ws = Workspace::new();
    std::fs::write(ws.path("data.txt"), "1 2 3 4 5 6 1 2 3 4\n1 2 3 4 5\n").unwrap();
    let out = caseq(&["split", "--data", s(&ws.path("data.txt")), "--gap-max", "3", "--out", s(&ws.path("s.csv"))]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(ws.path("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9 + 4);
    assert!(csv.contains("0,6,valid,\n"));
    assert!(csv.contains("0,10,test,3\n"));
    assert!(csv.contains("1,5,train,\n"));
}

#[test]
fn training_is_reproducible() {
    let ws = Workspace::new();
    let first = ws.trained();
    let a = std::fs::read(&first).unwrap();
    assert!(ws.train("run.toml", "again.ckpt", &[]).status.success());
    assert_eq!(a, std::fs::read(ws.path("again.ckpt")).unwrap());
    let log = std::fs::read_to_string(ws.path("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(ws.path("model.ckpt.manifest.json").exists());
}

#[test]
fn zero_epochs_saves_initial_parameters() {
    let ws = Workspace::new();
    assert!(ws.simulate("20", "1", "data.txt").status.success());
    std::fs::write(ws.path("zero.toml"), RUN.replace("epochs = 2", "epochs = 0")).unwrap();
    assert!(ws.train("zero.toml", "zero.ckpt", &[]).status.success());
    let (config, params) = load_checkpoint(&std::fs::read(ws.path("zero.ckpt")).unwrap()).unwrap();
    assert_eq!(params, init_params(&config, 4));
}

#[test]
fn single_baseline_trains_one_unit() {
    let ws = Workspace::new();
    assert!(ws.simulate("20", "1", "data.txt").status.success());
    std::fs::write(ws.path("k1.toml"), RUN.replace("units = 2", "units = 1").replace("layers = 2", "layers = 1")).unwrap();
    assert!(ws.train("k1.toml", "k1.ckpt", &["--baseline", "single"]).status.success());
    let (config, params) = load_checkpoint(&std::fs::read(ws.path("k1.ckpt")).unwrap()).unwrap();
    assert_eq!(config.baseline, caseq::model::BaselineMode::Single);
    assert_eq!(params.layers.len(), 1);
    assert_eq!(params.layers[0].units.len(), 1);
    let out = ws.train("k1.toml", "bad.ckpt", &["--baseline", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_rows_and_drop() {
    let ws = Workspace::new();
    let model = ws.trained();
    let data = ws.path("data.txt");
    let out = caseq(&[
        "eval", "--model", s(&model), "--data", s(&data), "--gap-max", "2", "--gaps", "0,1,2", "--metric", "acc",
        "--out", s(&ws.path("r.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(ws.path("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[4].starts_with("drop,acc,"));

    let out = caseq(&[
        "eval", "--model", s(&model), "--data", s(&data), "--gap-max", "0", "--gaps", "0", "--metric", "ndcg",
        "--negatives", "3", "--out", s(&ws.path("loo.csv")),
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(ws.path("loo.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,ndcg@10,"));
}

#[test]
fn eval_rejects_bad_metric_and_gap() {
    let ws = Workspace::new();
    let model = ws.trained();
    let data = ws.path("data.txt");
    let out = caseq(&[
        "eval", "--model", s(&model), "--data", s(&data), "--gap-max", "2", "--gaps", "0", "--metric", "mrr", "--out",
        s(&ws.path("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("acc") && err.contains("hr") && err.contains("ndcg"), "{err}");
    let out = caseq(&[
        "eval", "--model", s(&model), "--data", s(&data), "--gap-max", "2", "--gaps", "3", "--metric", "acc", "--out",
        s(&ws.path("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dump_tables() {
    let ws = Workspace::new();
    let model = ws.trained();
    let data = ws.path("data.txt");
    let dump = |what: &str, out: &str| {
        caseq(&["dump", "--model", s(&model), "--data", s(&data), "--what", what, "--out", s(&ws.path(out))])
    };
    assert!(dump("contexts", "c.csv").status.success());
    let csv = std::fs::read_to_string(ws.path("c.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::<(String, String), f64>::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry((f[0].into(), f[1].into())).or_default() += f[3].parse::<f64>().unwrap();
    }
    assert!(!sums.is_empty());
    assert!(sums.values().all(|v| (v - 1.0).abs() < 1e-9));

    assert!(dump("embeddings", "e.csv").status.success());
    assert_eq!(std::fs::read_to_string(ws.path("e.csv")).unwrap().lines().count(), 1 + 2 * 2);

    assert!(dump("timing", "t.csv").status.success());
    assert_eq!(dump("weights", "w.csv").status.code(), Some(2));
}

#[test]
fn checkpoint_survives_cli_round_trip() {
    let ws = Workspace::new();
    let model = ws.trained();
    let bytes = std::fs::read(&model).unwrap();
    let (config, params) = load_checkpoint(&bytes).unwrap();
    assert_eq!(save_checkpoint(&config, &params), bytes);
}

#[test]
fn verify_suites() {
    let out = caseq(&["verify", "--suite", "reduction"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS reduction.gru.bitwise"));
    assert_eq!(caseq(&["verify", "--suite", "everything"]).status.code(), Some(2));
}
