//! End-to-end checks of the binary: pipeline round trip, output formats,
//! exit-code contract, and flag precedence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn scd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary spawns")
}

fn run_ok(args: &[&str]) -> Output {
    let out = scd(args);
    assert!(
        out.status.success(),
        "scd {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    scd(args).status.code().expect("exit code")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    checkpoint: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// One tiny synthetic corpus and one trained checkpoint, shared by the tests
/// that only read them.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let corpus = dir.path().join("corpus.jsonl");
        run_ok(&[
            "synth",
            "--out",
            corpus.to_str().unwrap(),
            "--episodes",
            "12",
            "--min-utterances",
            "6",
            "--max-utterances",
            "9",
            "--speakers",
            "2",
            "--persona-vocab",
            "12",
            "--overlap",
            "0.0",
            "--change-prob",
            "0.5",
            "--seed",
            "5",
        ]);
        let run_dir = dir.path().join("run");
        run_ok(&[
            "train",
            "--data",
            corpus.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--model",
            "hierarchical",
            "--dim",
            "4",
            "--attn-dim",
            "4",
            "--context-size",
            "1",
            "--max-epochs",
            "2",
            "--batch-size",
            "32",
            "--seed",
            "5",
        ]);
        Fixture { corpus, checkpoint: run_dir.join("model.ckpt"), _dir: dir }
    })
}

fn decision_points(corpus: &Path) -> usize {
    std::fs::read_to_string(corpus)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let episode: serde_json::Value = serde_json::from_str(l).unwrap();
            episode["utterances"].as_array().unwrap().len() - 1
        })
        .sum()
}

#[test]
fn train_writes_every_artifact() {
    let f = fixture();
    let run_dir = f.checkpoint.parent().unwrap();
    for name in ["model.ckpt", "history.json", "metrics.json", "run_config.json"] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["test"]["accuracy"].is_number());
    assert!(metrics["val_f1"].is_number());
}

#[test]
fn eval_emits_a_json_report() {
    let f = fixture();
    let out = run_ok(&[
        "eval",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--data",
        f.corpus.to_str().unwrap(),
        "--split",
        "test",
        "--seed",
        "5",
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    for key in ["accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn"] {
        assert!(report[key].is_number(), "{key} missing from report");
    }
}

#[test]
fn predict_covers_every_boundary_in_tsv() {
    let f = fixture();
    let out = run_ok(&[
        "predict",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--data",
        f.corpus.to_str().unwrap(),
    ]);
    let text = stdout_of(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("episode_id\tposition\tp_change\tpredicted"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), decision_points(&f.corpus));
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), 4, "row {row:?}");
        let p: f64 = cols[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(cols[3] == "change" || cols[3] == "no_change");
        assert_eq!(cols[3] == "change", p >= 0.5);
    }
}

#[test]
fn predictions_ignore_speaker_ids() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let stripped = dir.path().join("stripped.jsonl");
    let rewritten: String = std::fs::read_to_string(&f.corpus)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut episode: serde_json::Value = serde_json::from_str(l).unwrap();
            for utt in episode["utterances"].as_array_mut().unwrap() {
                utt.as_object_mut().unwrap().remove("speaker");
            }
            episode.to_string() + "\n"
        })
        .collect();
    std::fs::write(&stripped, rewritten).unwrap();
    let with_ids = run_ok(&[
        "predict",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--data",
        f.corpus.to_str().unwrap(),
    ]);
    let without_ids = run_ok(&[
        "predict",
        "--checkpoint",
        f.checkpoint.to_str().unwrap(),
        "--data",
        stripped.to_str().unwrap(),
    ]);
    assert_eq!(stdout_of(&with_ids), stdout_of(&without_ids));
}

#[test]
fn gradcheck_reports_and_passes_on_a_small_model() {
    let out = run_ok(&[
        "gradcheck",
        "--dim",
        "4",
        "--attn-dim",
        "4",
        "--examples",
        "2",
        "--entries",
        "4",
    ]);
    assert!(stdout_of(&out).contains("max relative error"));
}

#[test]
fn sweep_emits_one_row_per_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = run_ok(&[
        "sweep",
        "--data",
        f.corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--models",
        "random_guess",
        "--contexts",
        "0,1",
        "--model",
        "hierarchical",
        "--dim",
        "4",
        "--attn-dim",
        "4",
        "--max-epochs",
        "1",
        "--batch-size",
        "32",
        "--seed",
        "5",
    ]);
    let text = stdout_of(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "table:\n{text}");
    assert!(rows[0].starts_with("random_guess"));
    assert!(rows[1].contains("ctx=0"));
    assert!(rows[2].contains("ctx=1"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("sweep.json")).unwrap())
            .unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.json");
    std::fs::write(
        &config_path,
        r#"{ "model": "no_context", "dim": 4, "dropout": 0.3, "train": { "max_epochs": 1, "batch_size": 32, "seed": 5 } }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    run_ok(&[
        "--config",
        config_path.to_str().unwrap(),
        "train",
        "--data",
        f.corpus.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--dim",
        "6",
    ]);
    let persisted: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run_config.json")).unwrap())
            .unwrap();
    // Flag beats file, file beats default.
    assert_eq!(persisted["dim"], 6);
    assert_eq!(persisted["dropout"], 0.3);
    assert_eq!(persisted["model"], "no_context");
}

#[test]
fn usage_errors_exit_with_code_two() {
    let f = fixture();
    // Unknown subcommand.
    assert_eq!(exit_code(&["bogus"]), 2);
    // Missing checkpoint file.
    assert_eq!(
        exit_code(&[
            "eval",
            "--checkpoint",
            "/nonexistent/model.ckpt",
            "--data",
            f.corpus.to_str().unwrap(),
        ]),
        2
    );
    // Unknown model kind.
    assert_eq!(
        exit_code(&["train", "--data", f.corpus.to_str().unwrap(), "--out", "/tmp/x", "--model", "mystery"]),
        2
    );
    // Missing config file.
    assert_eq!(
        exit_code(&["--config", "/nonexistent/cfg.json", "train", "--data", "x", "--out", "y"]),
        2
    );
    // Missing required path with no config fallback.
    assert_eq!(exit_code(&["train", "--out", "/tmp/x"]), 2);
}
