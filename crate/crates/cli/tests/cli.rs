use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoshot::episodes::{save_pfe1, EmbeddingDataset};
use protoshot::synthetic::{gaussian_dataset, GaussianSpec};
use protoshot::trainer::VALIDATION_SEED_SALT;
use serde_json::Value;

fn protoshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoshot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_dataset(dir: &Path, name: &str, spec: GaussianSpec) -> PathBuf {
    let path = dir.join(name);
    save_pfe1(&gaussian_dataset(&spec).unwrap(), &path).unwrap();
    path
}

fn spec(classes: usize, dim: usize, seed: u64) -> GaussianSpec {
    GaussianSpec {
        nuisance_dims: dim / 2,
        nuisance_std: 1.5,
        ..GaussianSpec::isotropic(classes, 24, dim, 1.0, 0.5, seed)
    }
}

/// Train/val/test files plus a small training config in a fresh directory.
struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "train.pfe1", spec(8, 8, 1));
        write_dataset(dir.path(), "val.pfe1", spec(6, 8, 2));
        write_dataset(dir.path(), "test.pfe1", spec(6, 8, 3));
        let config = dir.path().join("run.json");
        std::fs::write(
            &config,
            r#"{
                "train": "train.pfe1", "val": "val.pfe1", "test": "test.pfe1", "checkpoint_dir": "run",
                "epochs": 2, "tasks_per_epoch": 6, "accumulation": 3,
                "way": 3, "shot": 2, "queries": 3, "layers": 1, "heads": 2,
                "lr": 0.001, "val_episodes": 10, "episodes": 30, "seed": 5
            }"#,
        )
        .unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn train(&self) -> Output {
        let o = protoshot(&["train", "--config", self.config()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        o
    }
}

#[test]
fn train_writes_checkpoints_and_history() {
    let f = Fixture::new();
    f.train();
    assert!(f.path("run/last.pfck").exists());
    assert!(f.path("run/best.pfck").exists());
    let history: Value = serde_json::from_str(&std::fs::read_to_string(f.path("run/history.json")).unwrap()).unwrap();
    assert_eq!(history["config"]["epochs"], 2);
    assert_eq!(history["config"]["seed"], 5);
    assert_eq!(history["optimizer_steps"], 4);
    assert_eq!(history["history"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_reproduces_validation_accuracy() {
    let f = Fixture::new();
    f.train();
    let history: Value = serde_json::from_str(&std::fs::read_to_string(f.path("run/history.json")).unwrap()).unwrap();
    let seed = (5u64 ^ VALIDATION_SEED_SALT).to_string();
    let val = f.path("val.pfe1");
    let best = f.path("run/best.pfck");
    let o = protoshot(&[
        "eval",
        "--config",
        f.config(),
        "--test",
        val.to_str().unwrap(),
        "--checkpoint",
        best.to_str().unwrap(),
        "--episodes",
        "10",
        "--seed",
        &seed,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json_line = stdout(&o).lines().last().unwrap().to_string();
    let doc: Value = serde_json::from_str(&json_line).unwrap();
    assert_eq!(doc["report"]["mean"], history["best_val_accuracy"]);
    assert_eq!(doc["config"]["episodes"], 10);
}

#[test]
fn missing_dataset_exits_2_naming_path() {
    let o = protoshot(&["eval", "--bypass-module", "--test", "/nonexistent/test.pfe1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/test.pfe1"), "{}", stderr(&o));
}

#[test]
fn overflowing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let huge = write_dataset(dir.path(), "huge.pfe1", GaussianSpec::isotropic(4, 8, 4, 1e19, 1e18, 1));
    let out = dir.path().join("run");
    let o = protoshot(&[
        "train",
        "--train",
        huge.to_str().unwrap(),
        "--val",
        huge.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n",
        "2",
        "--k",
        "2",
        "--q",
        "1",
        "--layers",
        "1",
        "--heads",
        "1",
        "--epochs",
        "1",
        "--tasks-per-epoch",
        "2",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("episode 0"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let f = Fixture::new();
    f.train();
    let path = f.path("run/best.pfck");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let o = protoshot(&["eval", "--config", f.config(), "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn dim_mismatch_exits_1_with_both_dims() {
    let f = Fixture::new();
    f.train();
    let other = write_dataset(f.dir.path(), "wide.pfe1", spec(6, 12, 4));
    let best = f.path("run/best.pfck");
    let o = protoshot(&[
        "eval",
        "--config",
        f.config(),
        "--test",
        other.to_str().unwrap(),
        "--checkpoint",
        best.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("dim 8") && err.contains("dim 12"), "{err}");
}

#[test]
fn bypass_needs_no_checkpoint() {
    let f = Fixture::new();
    let o = protoshot(&["eval", "--config", f.config(), "--bypass-module"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mode bypass"));
    let o = protoshot(&["eval", "--config", f.config()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"epochz": 3}"#).unwrap();
    let o = protoshot(&["eval", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epochz"));
}

#[test]
fn gradcheck_passes_is_repeatable_and_catches_faults() {
    let o = protoshot(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
    let again = protoshot(&["gradcheck"]);
    assert_eq!(stdout(&o), stdout(&again));

    let o = protoshot(&["gradcheck", "--layers", "1", "--inject-fault", "matmul"]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn inspect_reports_counts_and_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let ds = EmbeddingDataset::new(
        3,
        vec![("cat".into(), vec![0.5; 6]), ("dog".into(), vec![1.5; 9])],
    )
    .unwrap();
    let path = dir.path().join("pets.pfe1");
    save_pfe1(&ds, &path).unwrap();
    let o = protoshot(&["inspect", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for line in ["dim: 3", "classes: 2", "class cat: 2", "class dog: 3", "samples: 5", "hash: valid"] {
        assert!(text.contains(line), "missing {line:?} in {text}");
    }

    let bytes = std::fs::read(&path).unwrap();
    let truncated = dir.path().join("short.pfe1");
    std::fs::write(&truncated, &bytes[..bytes.len() - 13]).unwrap();
    assert_eq!(code(&protoshot(&["inspect", truncated.to_str().unwrap()])), 2);

    let mut tampered = bytes.clone();
    let n = tampered.len();
    tampered[n - 12] ^= 1;
    let bad = dir.path().join("tampered.pfe1");
    std::fs::write(&bad, tampered).unwrap();
    let o = protoshot(&["inspect", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("hash: INVALID"));
}

#[test]
fn export_plot_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let test = write_dataset(dir.path(), "test.pfe1", spec(8, 8, 3));
    let train = write_dataset(dir.path(), "train.pfe1", spec(8, 8, 1));
    let run = dir.path().join("run");
    let o = protoshot(&[
        "train", "--train", train.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--layers", "1", "--heads", "2", "--epochs", "1", "--tasks-per-epoch", "2",
        "--n", "3", "--k", "2", "--q", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let best = run.join("best.pfck");
    let plot = dir.path().join("plot.jsonl");
    let o = protoshot(&[
        "export-plot", "--test", test.to_str().unwrap(), "--checkpoint", best.to_str().unwrap(),
        "--out", plot.to_str().unwrap(), "--n", "5", "--k", "5", "--q", "15", "--episodes", "8",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<Value> = std::fs::read_to_string(&plot)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 680);

    let report = dir.path().join("compare.json");
    let o = protoshot(&[
        "compare", "--test", test.to_str().unwrap(), "--with", best.to_str().unwrap(),
        "--episodes", "20", "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(doc["paired"], true);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn resume_extends_to_the_uninterrupted_checkpoint() {
    let f = Fixture::new();
    f.train();
    let full = std::fs::read(f.path("run/last.pfck")).unwrap();

    let g = Fixture::new();
    let o = protoshot(&["train", "--config", g.config(), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = protoshot(&["train", "--config", g.config(), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(g.path("run/last.pfck")).unwrap(), full);
    assert_eq!(
        std::fs::read(g.path("run/best.pfck")).unwrap(),
        std::fs::read(f.path("run/best.pfck")).unwrap()
    );
}
