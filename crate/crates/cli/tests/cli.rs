//! End-to-end runs of the installed binary: generate, train, evaluate,
//! prune, probe, transplant, analyze, checking exit codes, artifact files,
//! and byte-level rerun determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_whatwhere");

const TINY_NET: &str = "\
input 16 16 1
layer c1 conv out=4 k=3 stride=1 pad=1
layer n1 bn
layer r1 relu
layer pool1 pool window=2 stride=2
layer f1 fc out=16
layer fc7 relu
layer d1 dropout rate=0.25
head category 3
head pose 4
inject pool1 8 8
lambda 1.0
";

fn tmp_root() -> PathBuf {
    // Unique per test process: manifests append, so a reused directory from
    // an earlier run would distort line counts.
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!(
        "cli-{}",
        std::process::id()
    ));
    fs::create_dir_all(&root).unwrap();
    root
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("WW_OUT_ROOT")
        .env_remove("WW_THREADS")
        .output()
        .expect("spawn binary")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).trim().to_string();
    assert!(
        !err.is_empty() && err.lines().count() == 1,
        "expected one stderr line, got: {err:?}"
    );
    err
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated once; every test reads from this directory.
fn data_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tmp_root().join("data");
        let out = run(&[
            "gen-data",
            "--categories",
            "3",
            "--n-rot",
            "2",
            "--n-az",
            "2",
            "--instances",
            "2",
            "--backgrounds",
            "1",
            "--height",
            "16",
            "--width",
            "16",
            "--seed",
            "5",
            "--train-fraction",
            "0.5",
            "--out",
            path_str(&dir),
        ]);
        assert_ok(&out);
        assert!(dir.join("train.wwds").is_file());
        assert!(dir.join("test.wwds").is_file());
        assert!(dir.join("manifest.jsonl").is_file());
        dir
    })
}

fn net_path() -> &'static Path {
    static NET: OnceLock<PathBuf> = OnceLock::new();
    NET.get_or_init(|| {
        let p = tmp_root().join("tiny.net");
        fs::write(&p, TINY_NET).unwrap();
        p
    })
}

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let data = data_dir();
    let train_data = data.join("train.wwds");
    let test_data = data.join("test.wwds");
    let mut args = vec![
        "train",
        "--net",
        path_str(net_path()),
        "--arch",
        "inject_multi",
        "--train-data",
        path_str(&train_data),
        "--test-data",
        path_str(&test_data),
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--seed",
        "11",
        "--out",
        path_str(dir),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

/// Trained once; later tests reuse the checkpoint.
fn trained_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tmp_root().join("train");
        let out = train_into(&dir, &[]);
        assert_ok(&out);
        assert!(dir.join("checkpoint.wwck").is_file());
        assert!(dir.join("epochs.csv").is_file());
        dir
    })
}

fn eval_metric(csv: &Path, metric: &str) -> f64 {
    let text = fs::read_to_string(csv).unwrap();
    for line in text.lines().skip(1) {
        let (name, value) = line.split_once(',').unwrap();
        if name == metric {
            return value.parse().unwrap();
        }
    }
    panic!("metric {metric} missing from {}", csv.display());
}

#[test]
fn pipeline_smoke_prune_preserves_accuracy() {
    let data = data_dir();
    let ckpt = trained_dir().join("checkpoint.wwck");
    let test_data = data.join("test.wwds");

    let eval_full = tmp_root().join("eval_full");
    assert_ok(&run(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&test_data),
        "--net",
        path_str(net_path()),
        "--out",
        path_str(&eval_full),
    ]));

    let prune_dir = tmp_root().join("pruned");
    assert_ok(&run(&[
        "prune",
        "--checkpoint",
        path_str(&ckpt),
        "--out",
        path_str(&prune_dir),
    ]));
    let pruned = prune_dir.join("pruned.wwck");
    assert!(pruned.is_file());

    let eval_pruned = tmp_root().join("eval_pruned");
    assert_ok(&run(&[
        "eval",
        "--checkpoint",
        path_str(&pruned),
        "--data",
        path_str(&test_data),
        "--out",
        path_str(&eval_pruned),
    ]));

    let full = eval_metric(&eval_full.join("eval.csv"), "accuracy");
    let cut = eval_metric(&eval_pruned.join("eval.csv"), "accuracy");
    assert_eq!(full, cut, "pruning changed category accuracy");
    // The pose head is gone from the pruned run's report.
    let pruned_csv = fs::read_to_string(eval_pruned.join("eval.csv")).unwrap();
    assert!(!pruned_csv.contains("pose_accuracy"));
    let full_csv = fs::read_to_string(eval_full.join("eval.csv")).unwrap();
    assert!(full_csv.contains("pose_accuracy"));
}

#[test]
fn eval_rejects_a_mismatched_description() {
    let ckpt = trained_dir().join("checkpoint.wwck");
    let other = tmp_root().join("other.net");
    fs::write(&other, TINY_NET.replace("out=4", "out=8")).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data_dir().join("test.wwds")),
        "--net",
        path_str(&other),
        "--out",
        path_str(&tmp_root().join("eval_bad")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_line(&out);
    assert!(err.contains("hash mismatch"), "stderr: {err}");
}

#[test]
fn rerun_reproduces_identical_artifacts() {
    let first = trained_dir();
    let second = tmp_root().join("train_rerun");
    assert_ok(&train_into(&second, &[]));
    let a = fs::read(first.join("epochs.csv")).unwrap();
    let b = fs::read(second.join("epochs.csv")).unwrap();
    assert_eq!(a, b, "epoch logs differ between identical runs");
    let ca = fs::read(first.join("checkpoint.wwck")).unwrap();
    let cb = fs::read(second.join("checkpoint.wwck")).unwrap();
    assert_eq!(ca, cb, "checkpoints differ between identical runs");
}

#[test]
fn manifest_lines_accumulate_and_parse() {
    let dir = tmp_root().join("train_manifest");
    assert_ok(&train_into(&dir, &[]));
    assert_ok(&train_into(&dir, &[]));
    let text = fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "one manifest line per run");
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["command"], "train");
        assert_eq!(v["config"]["epochs"], 1);
        assert_eq!(v["config"]["arch"], "inject_multi");
        assert_eq!(v["seeds"]["root"], 11);
        assert!(v["duration_secs"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn probe_transplant_and_analyze_produce_artifacts() {
    let data = data_dir();
    let ckpt = trained_dir().join("checkpoint.wwck");

    let probe_dir = tmp_root().join("probe");
    assert_ok(&run(&[
        "probe",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data.join("train.wwds")),
        "--batches",
        "2",
        "--batch-size",
        "4",
        "--out",
        path_str(&probe_dir),
    ]));
    let probe_csv = fs::read_to_string(probe_dir.join("probe.csv")).unwrap();
    assert!(probe_csv.starts_with("weighting,partition,l2,rms,elements\n"));
    assert_eq!(probe_csv.lines().count(), 7, "2 weightings x 3 partitions");

    let tx_dir = tmp_root().join("transplant");
    assert_ok(&run(&[
        "transplant",
        "--from",
        path_str(&ckpt),
        "--arch",
        "base",
        "--keep",
        "shared",
        "--seed",
        "3",
        "--out",
        path_str(&tx_dir),
    ]));
    assert!(tx_dir.join("transplant.wwck").is_file());

    let an_dir = tmp_root().join("analyze");
    assert_ok(&run(&[
        "analyze",
        "--which",
        "decouple",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data.join("test.wwds")),
        "--nodes",
        "pool1,fc7",
        "--out",
        path_str(&an_dir),
    ]));
    let dec = fs::read_to_string(an_dir.join("decouple.csv")).unwrap();
    assert!(dec.starts_with("node,gamma,units_used,dead_units\n"));
    assert_eq!(dec.lines().count(), 3);

    let rf_dir = tmp_root().join("rf");
    assert_ok(&run(&[
        "analyze",
        "--which",
        "rf",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data.join("test.wwds")),
        "--node",
        "pool1",
        "--k",
        "3",
        "--units",
        "4",
        "--cols",
        "2",
        "--out",
        path_str(&rf_dir),
    ]));
    let pgm = fs::read(rf_dir.join("rf_pool1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    let em_dir = tmp_root().join("embed");
    assert_ok(&run(&[
        "analyze",
        "--which",
        "embed",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data.join("test.wwds")),
        "--node",
        "fc7",
        "--out",
        path_str(&em_dir),
    ]));
    let embed = fs::read_to_string(em_dir.join("embed.csv")).unwrap();
    assert!(embed.starts_with("sample,category,pose,x,y\n"));
}

#[test]
fn resume_continues_from_a_checkpoint() {
    let data = data_dir();
    let dir = tmp_root().join("resumed");
    let out = run(&[
        "train",
        "--resume",
        path_str(&trained_dir().join("checkpoint.wwck")),
        "--train-data",
        path_str(&data.join("train.wwds")),
        "--test-data",
        path_str(&data.join("test.wwds")),
        "--epochs",
        "2",
        "--out",
        path_str(&dir),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(dir.join("epochs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,train_cat_loss,train_pose_loss,test_acc,lr"
    );
    // Epoch rows carry the completed-epoch count, so the single new row
    // from a 1-epoch checkpoint reads 2.
    let row = lines.next().expect("one new epoch row");
    assert!(row.starts_with("2,"), "resume adds exactly epoch 2: {row}");
    assert!(lines.next().is_none());
}

#[test]
fn bad_flag_values_exit_two() {
    let out = run(&["train", "--train-data", "x", "--test-data", "y", "--out", "z"]);
    assert_eq!(out.status.code(), Some(2), "missing --arch is a usage error");

    let out = run(&["analyze", "--which", "nope", "--checkpoint", "a", "--data", "b", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2));
    stderr_line(&out);
}

#[test]
fn missing_files_exit_three() {
    let out = run(&[
        "eval",
        "--checkpoint",
        "no_such.wwck",
        "--data",
        "no_such.wwds",
        "--out",
        path_str(&tmp_root().join("nowhere")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    stderr_line(&out);
}

#[test]
fn divergence_exits_four() {
    let dir = tmp_root().join("diverged");
    let out = train_into(&dir, &["--lr", "1e18"]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err = stderr_line(&out);
    assert!(err.contains("numeric"), "stderr: {err}");
}

#[test]
fn out_root_prefixes_relative_paths() {
    let root = tmp_root().join("rooted");
    fs::create_dir_all(&root).unwrap();
    let data = data_dir();
    let out = Command::new(BIN)
        .args([
            "gen-data",
            "--categories",
            "2",
            "--n-rot",
            "1",
            "--n-az",
            "2",
            "--instances",
            "2",
            "--backgrounds",
            "1",
            "--height",
            "8",
            "--width",
            "8",
            "--train-fraction",
            "0.5",
            "--out",
            "nested/run",
        ])
        .env("WW_OUT_ROOT", &root)
        .env("WW_THREADS", "1")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(root.join("nested/run/train.wwds").is_file());
    // The eval above must not have touched the shared data directory.
    assert!(data.join("train.wwds").is_file());
}
