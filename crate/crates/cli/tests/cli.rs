//! End-to-end tests of the `slidematch` binary: argument handling, exit
//! codes, on-disk artifacts, and the stdout/stderr contracts of every
//! subcommand. Each test drives the compiled binary through
//! `std::process::Command`, exactly as a shell user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slidematch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary must spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exits normally")
}

/// Generates a small 64 px dataset (3 slides × 2 train + 1 held-out
/// query) under `dir` and returns the dataset path as a string.
fn small_dataset(dir: &Path, seed: &str) -> String {
    let data = dir.join("data");
    let out = run(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        seed,
        "--slides",
        "3",
        "--queries-per-slide",
        "2",
        "--heldout-per-slide",
        "1",
        "--image-size",
        "64",
        "--levels",
        "1,5",
    ]);
    assert_eq!(code(&out), 0, "generate failed: {}", stderr(&out));
    data.to_str().unwrap().to_string()
}

/// Trains `rounds` fast rounds on `data`, writing the run to `run_dir`.
fn small_train(data: &str, run_dir: &Path, rounds: &str) -> Output {
    run(&[
        "train",
        "--manifest",
        data,
        "--out",
        run_dir.to_str().unwrap(),
        "--rounds",
        rounds,
        "--round-size",
        "8",
        "--batch",
        "4",
        "--epochs-per-round",
        "1",
    ])
}

#[test]
fn help_and_usage_errors() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = stdout(&help);
    for sub in ["generate", "train", "eval", "query", "inspect-weights"] {
        assert!(text.contains(sub), "--help must list `{sub}`:\n{text}");
    }

    let none = run(&[]);
    assert_eq!(code(&none), 1, "missing subcommand is a usage error");
    assert!(stderr(&none).contains("Usage"));

    let missing = run(&["generate"]);
    assert_eq!(code(&missing), 1, "missing --out is a usage error");

    let unknown = run(&["train", "--no-such-flag"]);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn generate_is_deterministic_and_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = run(&[
            "generate",
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "11",
            "--slides",
            "3",
            "--queries-per-slide",
            "2",
            "--heldout-per-slide",
            "1",
            "--image-size",
            "64",
            "--levels",
            "1,5",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(
            stdout(&out).contains("wrote 3 targets and 9 queries (6 train, 3 heldout)"),
            "unexpected summary: {}",
            stdout(&out)
        );
    }

    // Same seed, different directories: byte-identical artifacts.
    for name in ["manifest.txt", "images/s0000.png", "images/q0002_002.png"] {
        let fa = std::fs::read(a.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} must not depend on the output path");
    }

    let pngs = std::fs::read_dir(a.join("images"))
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "png").unwrap_or(false)
        })
        .count();
    assert_eq!(pngs, 3 + 9, "one PNG per slide and per query");
}

#[test]
fn train_eval_query_inspect_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "13");
    let run_dir = tmp.path().join("run");

    // Fresh one-round training run.
    let t1 = small_train(&data, &run_dir, "1");
    assert_eq!(code(&t1), 0, "train failed: {}", stderr(&t1));
    assert!(stdout(&t1).contains("completed 1 rounds"));
    for artifact in ["checkpoint.ckpt", "weights.tsv", "train_log.txt"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }

    // Resume to round 2: one more round runs, artifacts stay in place.
    let t2 = small_train(&data, &run_dir, "2");
    assert_eq!(code(&t2), 0, "resume failed: {}", stderr(&t2));
    assert!(stdout(&t2).contains("completed 2 rounds (1 run now)"));
    let log = std::fs::read_to_string(run_dir.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2, "one log line per round:\n{log}");

    // Resuming under different hyperparameters must be refused.
    let clash = run(&[
        "train",
        "--manifest",
        &data,
        "--out",
        run_dir.to_str().unwrap(),
        "--rounds",
        "3",
        "--round-size",
        "8",
        "--batch",
        "4",
        "--epochs-per-round",
        "1",
        "--lr",
        "1e-3",
    ]);
    assert_eq!(code(&clash), 1, "config clash must exit 1: {}", stderr(&clash));

    // Evaluation: table on stdout, report files on request.
    let ckpt = run_dir.join("checkpoint.ckpt");
    let eval_dir = tmp.path().join("eval");
    let ev = run(&[
        "eval",
        "--manifest",
        &data,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--ks",
        "1,2",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&ev), 0, "eval failed: {}", stderr(&ev));
    let table = stdout(&ev);
    assert!(table.contains("hit@1") && table.contains("all"), "table:\n{table}");
    let machine = std::fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    assert!(machine.starts_with("format retrieval-report v1"));
    assert!(eval_dir.join("report_table.txt").exists());

    // Split filter: the held-out split has 3 of the 9 queries.
    let held = run(&[
        "eval",
        "--manifest",
        &data,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "heldout",
        "--ks",
        "1",
    ]);
    assert_eq!(code(&held), 0, "{}", stderr(&held));
    assert!(stdout(&held).contains(" 3"), "held-out row count:\n{}", stdout(&held));

    // Query: one tab-separated line per ranked target, best first.
    let image = Path::new(&data).join("images/q0000_000.png");
    let q = run(&[
        "query",
        "--manifest",
        &data,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "-k",
        "2",
    ]);
    assert_eq!(code(&q), 0, "query failed: {}", stderr(&q));
    let q_out = stdout(&q);
    let lines: Vec<&str> = q_out.lines().collect();
    assert_eq!(lines.len(), 2);
    let mut scores = Vec::new();
    for line in &lines {
        let (id, score) = line.split_once('\t').expect("id<TAB>score");
        assert!(id.starts_with('s'), "target id: {id}");
        scores.push(score.parse::<f64>().expect("numeric score"));
    }
    assert!(scores[0] >= scores[1], "descending scores: {scores:?}");

    // Over-large k lists everything and warns on stderr.
    let q_all = run(&[
        "query",
        "--manifest",
        &data,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "-k",
        "99",
    ]);
    assert_eq!(code(&q_all), 0);
    assert_eq!(stdout(&q_all).lines().count(), 3, "all 3 targets listed");
    assert!(stderr(&q_all).contains("exceeds"), "clip warning expected");

    // Weight table listing: header then `query<TAB>target<TAB>weight`.
    let table_path = run_dir.join("weights.tsv");
    let iw = run(&["inspect-weights", "--table", table_path.to_str().unwrap(), "--top", "4"]);
    assert_eq!(code(&iw), 0, "inspect-weights failed: {}", stderr(&iw));
    let text = stdout(&iw);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("universe 18 "), "6 queries × 3 targets: {header}");
    assert!(text.lines().count() <= 1 + 4, "at most --top entries:\n{text}");
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "row: {line}");
    }
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let broken = tmp.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join("manifest.txt"), "not a manifest\n").unwrap();

    let out = run(&[
        "eval",
        "--manifest",
        broken.to_str().unwrap(),
        "--checkpoint",
        "nowhere.ckpt",
    ]);
    assert_eq!(code(&out), 2, "corrupt manifest: {}", stderr(&out));
}

#[test]
fn missing_files_exit_3() {
    let out = run(&["inspect-weights", "--table", "no/such/table.tsv"]);
    assert_eq!(code(&out), 3, "io failure: {}", stderr(&out));
}

#[test]
fn profile_image_size_mismatch_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let data: PathBuf = tmp.path().join("data32");
    let out = run(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--slides",
        "2",
        "--queries-per-slide",
        "2",
        "--image-size",
        "32",
        "--levels",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let t = small_train(data.to_str().unwrap(), &tmp.path().join("run32"), "1");
    assert_eq!(code(&t), 1, "desk profile expects 64 px images: {}", stderr(&t));
}
