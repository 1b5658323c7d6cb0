use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
    "data": {"synthetic": {"seed": 11, "n_train": 120, "n_test": 40, "label_probs": [0.25, 0.25, 0.25, 0.25],
             "window_s": 10, "transcript_len": [8, 16], "chat_len": [4, 12], "frames_per_window": 16, "mel_bins": 8}},
    "train": {"teacher": {"epochs": 2}, "distill": {"epochs": 2}}
}"#;

fn mmkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmkd"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mmkd(dir, args);
    assert!(
        out.status.success(),
        "mmkd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn record(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_record.json")).unwrap()).unwrap()
}

fn project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), SMALL).unwrap();
    ok(dir.path(), &["gen-data", "--config", "config.json"]);
    for m in ["audio", "chat", "transcript"] {
        ok(
            dir.path(),
            &["train-teacher", "--modality", m, "--config", "config.json"],
        );
    }
    dir
}

#[test]
fn pipeline_on_defaults_produces_four_label_metrics() {
    let dir = project();
    let p = dir.path();
    ok(p, &["distill", "--config", "config.json"]);
    ok(p, &["evaluate", "--config", "config.json"]);
    for f in ["student.ckpt", "projections.ckpt", "heads.ckpt", "loss_history.csv"] {
        assert!(p.join("runs/distill").join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(p.join("runs/distill/loss_history.csv")).unwrap();
    assert!(header.starts_with("epoch,step,lr,l_hid,l_dis,l_task,l_total,accuracy\n"));
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(p.join("runs/evaluate/metrics.json")).unwrap()).unwrap();
    let labels: Vec<&str> = metrics["per_label"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["KILL", "DRAGON", "TOWER", "OTHER"]);

    let rec = record(&p.join("runs/evaluate"));
    assert_eq!(rec["command"], "evaluate");
    assert_eq!(rec["exit_status"], 0);
    assert_eq!(rec["input_hash"].as_str().unwrap().len(), 64);
    assert!(rec["outputs"].as_array().unwrap().len() == 2);
    for t in ["audio", "chat", "transcript"] {
        assert!(p.join("teachers").join(t).join("teacher_metrics.json").exists());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = project();
    let p = dir.path();
    ok(p, &["distill", "--config", "config.json", "--out", "a"]);
    ok(p, &["distill", "--config", "config.json", "--out", "b"]);
    for f in ["student.ckpt", "projections.ckpt", "heads.ckpt", "loss_history.csv"] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(record(&p.join("a"))["input_hash"], record(&p.join("b"))["input_hash"]);

    ok(
        p,
        &["gen-data", "--config", "config.json", "--out", "c1", "--seed", "4"],
    );
    ok(
        p,
        &["gen-data", "--config", "config.json", "--out", "c2", "--seed", "4"],
    );
    assert_eq!(
        fs::read(p.join("c1/train.jsonl")).unwrap(),
        fs::read(p.join("c2/train.jsonl")).unwrap()
    );
    assert_ne!(
        fs::read(p.join("c1/train.jsonl")).unwrap(),
        fs::read(p.join("corpus/train.jsonl")).unwrap()
    );
}

#[test]
fn empty_teacher_subset_is_a_config_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("config.json"), r#"{"distill": {"teachers": []}}"#).unwrap();
    let out = mmkd(p, &["distill", "--config", "config.json", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().next(), Some("CONFIG_ERROR"));
    let files: Vec<_> = fs::read_dir(p.join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(files, ["run_record.json"]);
    let rec = record(&p.join("run"));
    assert_eq!(rec["exit_status"], 2);
    assert_eq!(rec["error"]["code"], "CONFIG_ERROR");
    assert!(rec["outputs"].as_array().unwrap().is_empty());
}

#[test]
fn bad_configs_and_missing_inputs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("unknown.json"),
        r#"{"train": {"teacher": {"learning_rate": 1}}}"#,
    )
    .unwrap();
    let out = mmkd(
        p,
        &[
            "train-teacher",
            "--modality",
            "chat",
            "--config",
            "unknown.json",
            "--out",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = mmkd(p, &["evaluate", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!p.join("y/metrics.json").exists());
}

#[test]
fn verify_lists_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmkd(dir.path(), &["verify", "--out", "v"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines.len() >= 15);
    assert!(lines
        .iter()
        .all(|l| l.starts_with("PASS ") && l.contains("measured=") && l.contains("tolerance=")));
    for name in [
        "grad_check.total_loss",
        "layer_map.12_to_8_table",
        "loss_algebra.total_is_sum",
        "metrics.macro_precision",
    ] {
        assert!(stdout.contains(name), "{name}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("v/verify.txt")).unwrap(), stdout);
}

#[test]
fn segment_builds_a_corpus_from_streams() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let w = |name: &str, text: &str| fs::write(p.join(name), text).unwrap();
    w(
        "transcript.jsonl",
        "{\"start_s\":0,\"end_s\":5,\"tokens\":[2,3]}\n{\"start_s\":5,\"end_s\":10,\"tokens\":[4],\"tags\":[2]}\n{\"start_s\":12,\"end_s\":15,\"tokens\":[]}\n",
    );
    w(
        "chat.jsonl",
        "{\"t_s\":1,\"tokens\":[2]}\n{\"t_s\":5,\"tokens\":[3,2]}\n{\"t_s\":11,\"tokens\":[2]}\n",
    );
    let frames: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64, 0.5]).collect();
    w(
        "audio.json",
        &serde_json::json!({"frame_rate": 1.0, "frames": frames}).to_string(),
    );
    w(
        "events.jsonl",
        "{\"timestamp_s\":5,\"event\":\"KILL\"}\n{\"timestamp_s\":13,\"event\":\"TOWER\"}\n",
    );
    w("tv.txt", "<pad>\nO\na\nb\nc\n");
    w("cv.txt", "<pad>\nO\nx\ny\n");
    w("tt.txt", "<pad>\nO\nCHAMPION\n");
    w("ct.txt", "<pad>\nO\n");
    w(
        "config.json",
        r#"{"data": {"corpus_dir": "seg", "streams": {"transcript": "transcript.jsonl", "chat": "chat.jsonl",
            "audio": "audio.json", "events": "events.jsonl", "transcript_vocab": "tv.txt", "chat_vocab": "cv.txt",
            "transcript_tags": "tt.txt", "chat_tags": "ct.txt", "test_fraction": 0.34}}}"#,
    );
    ok(p, &["segment", "--config", "config.json"]);
    let train: Vec<Value> = fs::read_to_string(p.join("seg/train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let test = fs::read_to_string(p.join("seg/test.jsonl")).unwrap();
    assert_eq!(train.len(), 2);
    assert_eq!(test.lines().count(), 1);
    assert_eq!(train[0]["label"], "OTHER");
    assert_eq!(train[1]["label"], "KILL");
    assert_eq!(train[1]["chat_tokens"], serde_json::json!([3, 2]));
    assert_eq!(train[0]["audio"].as_array().unwrap().len(), 5);
    assert!(test.contains("\"TOWER\""));

    fs::write(p.join("chat.jsonl"), "{\"t_s\":1}\n").unwrap();
    let out = mmkd(p, &["segment", "--config", "config.json", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(3));
}
