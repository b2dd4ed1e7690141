use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffgraph::graph::{load_dataset, save_dataset, Graph, Label};
use diffgraph::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use diffgraph::layers::MpnnKind;
use diffgraph::tensor::Tensor;
use diffgraph::training::read_metrics_csv;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_diffgraph"));
    c.env_remove("DIFFGRAPH_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn gen_cycle(dir: &Path, name: &str, count: &str, seed: &str) -> PathBuf {
    let path = dir.join(name);
    ok(&["gen", "cycle-vs-path", "--n", "6", "--count", count, "--seed", seed, "--out", s(&path)]);
    path
}

/// A small cycle-vs-path run config with absolute paths.
fn small_config(dir: &Path, data: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "model.num_layers": 1,
        "model.hidden": 8,
        "model.heads": 2,
        "model.mpnn": "gcn",
        "train.epochs": 3,
        "train.batch_size": 8,
        "data.train": data,
        "output_dir": dir.join("run"),
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn gen_is_balanced_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    let line = ok(&["gen", "cycle-vs-path", "--n", "6", "--count", "64", "--seed", "7", "--out", s(&a)]);
    assert!(line.contains("64 graphs") && line.contains("2 classes (32/32)"), "{line}");
    ok(&["gen", "cycle-vs-path", "--n", "6", "--count", "64", "--seed", "7", "--out", s(&b)]);
    let text = fs::read(&a).unwrap();
    assert_eq!(text.iter().filter(|&&c| c == b'\n').count(), 64);
    assert_eq!(text, fs::read(&b).unwrap());
    let graphs = load_dataset(&a).unwrap();
    let ones = graphs.iter().filter(|g| g.label() == &Label::Class(1)).count();
    assert_eq!(ones, 32);
}

#[test]
fn gen_refuses_to_overwrite_and_rejects_unknown_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_cycle(tmp.path(), "a.jsonl", "4", "1");
    let again = run(&["gen", "cycle-vs-path", "--count", "4", "--out", s(&a)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["gen", "cycle-vs-path", "--count", "4", "--out", s(&a), "--force"]);

    let bogus = run(&["gen", "bogus", "--out", s(&tmp.path().join("x.jsonl"))]);
    assert_eq!(bogus.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bogus.stderr);
    for kind in ["sbm-node", "cycle-vs-path", "pair-contact"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn train_twice_gives_identical_csv_and_eval_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_cycle(tmp.path(), "train.jsonl", "16", "3");
    let cfg = small_config(tmp.path(), &data);
    let out = tmp.path().join("run");

    ok(&["train", s(&cfg), "seed=1"]);
    let first = fs::read(out.join("metrics.csv")).unwrap();
    ok(&["train", s(&cfg), "seed=1"]);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), first);

    let echo = out.join("config.resolved.json");
    ok(&["train", s(&echo)]);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), first);

    let recs = read_metrics_csv(first.as_slice()).unwrap();
    let last_train = recs.iter().rev().find(|r| r.split == "train").unwrap();
    let csv = tmp.path().join("eval.csv");
    let printed = ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("last.ckpt")),
        "--data",
        s(&data),
        "--batch-size",
        "8",
        "--csv",
        s(&csv),
    ]);
    assert!(printed.contains("run_seed,epoch,split,loss,metric_name,metric_value"), "{printed}");
    let evals = read_metrics_csv(fs::read(&csv).unwrap().as_slice()).unwrap();
    assert_eq!(evals.len(), 1);
    assert_eq!(evals[0].loss, last_train.loss);
    assert_eq!(evals[0].metrics, last_train.metrics);
}

#[test]
fn diff_free_override_builds_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_cycle(tmp.path(), "train.jsonl", "8", "3");
    let cfg = small_config(tmp.path(), &data);
    ok(&["train", s(&cfg), "epochs=1"]);
    let with = load_checkpoint(tmp.path().join("run/best.ckpt")).unwrap();
    assert!(with.model.tensor_names().iter().any(|n| n.contains("diff_enc")));

    ok(&["train", s(&cfg), "epochs=1", "use_diff_local=false", "use_diff_global=false"]);
    let without = load_checkpoint(tmp.path().join("run/best.ckpt")).unwrap();
    assert!(!without.model.tensor_names().iter().any(|n| n.contains("diff_enc")));
}

#[test]
fn bad_train_inputs_fail_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_cycle(tmp.path(), "train.jsonl", "8", "3");
    let cfg = small_config(tmp.path(), &data);

    let typo = run(&["train", s(&cfg), "hiden=4"]);
    assert!(!typo.status.success());
    assert!(String::from_utf8_lossy(&typo.stderr).contains("hiden"));

    let missing = run(&["train", s(&cfg), &format!("data.train={}", s(&tmp.path().join("nope.jsonl")))]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.jsonl"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn eval_rejects_empty_data_and_mismatched_task() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_cycle(tmp.path(), "train.jsonl", "8", "3");
    let cfg = small_config(tmp.path(), &data);
    ok(&["train", s(&cfg), "epochs=1"]);
    let ckpt = tmp.path().join("run/last.ckpt");

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&empty)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation error"));

    let out = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "node-class"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("task"));
}

#[test]
fn zeroed_classifier_scores_one_half() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { num_layers: 1, hidden: 4, heads: 2, mpnn: MpnnKind::Gcn, ..Default::default() };
    let mut model = Model::new(cfg).unwrap();
    model.store_mut().zero_matching("");
    let ckpt = tmp.path().join("zero.ckpt");
    save_checkpoint(&Checkpoint { model, step: 0, optimizer: None }, &ckpt).unwrap();

    let graphs: Vec<Graph> = (0..10)
        .map(|i| Graph::new(3, vec![[0, 1], [1, 2]], Tensor::full(&[3, 1], 1.0), None, Label::Class(i % 2)).unwrap())
        .collect();
    let data = tmp.path().join("balanced.jsonl");
    save_dataset(&graphs, &data).unwrap();
    let printed = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(printed.lines().any(|l| l == "accuracy 0.5"), "{printed}");
}

#[test]
fn shipped_overfit_config_fits_its_training_set() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sbm.jsonl");
    ok(&["gen", "sbm-node", "--seed", "0", "--count", "16", "--blocks", "2", "--block-size", "20", "--out", s(&data)]);
    let out = tmp.path().join("overfit");
    ok(&[
        "train",
        s(&repo_config("overfit-sbm.json")),
        &format!("data.train={}", s(&data)),
        &format!("output_dir={}", s(&out)),
    ]);
    let recs = read_metrics_csv(fs::read(out.join("metrics.csv")).unwrap().as_slice()).unwrap();
    let last = recs.iter().rev().find(|r| r.split == "train").unwrap();
    assert_eq!(last.epoch, 300);
    assert!(last.get("accuracy").unwrap() >= 0.99, "{last:?}");
}

#[test]
fn verify_reports_requested_suites_and_catches_faults() {
    let out = ok(&["verify", "--suite", "metrics", "--suite", "optimizer"]);
    assert!(out.lines().next().unwrap().starts_with("PASS metrics"), "{out}");
    assert!(out.contains("2 of 2 suites passed"), "{out}");

    let bad = run(&["verify", "--suite", "gradient", "--inject-fault", "diff-enc-flip"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.starts_with("FAIL gradient"), "{text}");

    let unknown = run(&["verify", "--suite", "nope"]);
    assert_eq!(unknown.status.code(), Some(2));
}
