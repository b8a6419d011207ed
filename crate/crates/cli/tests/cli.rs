use std::path::Path;
use std::process::{Command, Output};

use pianist_core::score::{PianoState, PianoStateTrajectory};
use serde_json::Value;

fn pianist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pianist")).args(args).output().expect("spawn pianist")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr is JSON")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn eval_identical_files_gives_f1_one() {
    let dir = tempfile::tempdir().unwrap();
    let on = PianoState::from_keys([40, 44]);
    let csv = PianoStateTrajectory::new(20.0, vec![on, on, PianoState::empty()]).unwrap().to_csv();
    let p = dir.path().join("pressed.csv");
    write(&p, &csv);
    let out = dir.path().join("m.json");
    let o = pianist(&["eval", "--pressed", p.to_str().unwrap(), "--goal", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["f1"], 1.0);
    assert_eq!(v["tp"], 4);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = pianist(&["levitate"]);
    assert!(!o.status.success());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_reports_path_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = pianist(&["eval", "--pressed", missing.to_str().unwrap(), "--goal", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("nope.csv"));
}

#[test]
fn config_is_required_for_stages() {
    let o = pianist(&["ingest"]);
    assert!(!o.status.success());
    assert_eq!(stderr_json(&o)["error"]["kind"], "config");
}

#[test]
fn schema_violation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipeline.json");
    write(&cfg, r#"{"ik": {"dt": -1.0}}"#);
    let o = pianist(&["--config", cfg.to_str().unwrap(), "ingest"]);
    assert!(!o.status.success());
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("dt"), "{e}");

    write(&cfg, r#"{"cem": {"population": "many"}}"#);
    let o = pianist(&["--config", cfg.to_str().unwrap(), "ingest"]);
    assert_eq!(stderr_json(&o)["error"]["kind"], "json");
}

#[test]
fn front_stages_on_generated_corpus_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = pianist(&["gen-corpus", "--out", corpus.to_str().unwrap(), "--train", "1", "--test", "1", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["train"][0], "train_0");
    let cfg = corpus.join("pipeline.json");
    let midi_before = std::fs::read(corpus.join("midi/train_0.mid")).unwrap();

    let run = |cmd: &str| {
        let o = pianist(&["--config", cfg.to_str().unwrap(), "--jobs", "2", cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let outputs = ["out/states/train_0.csv", "out/retarget/train_0.csv", "out/nominal/test_0.csv"];
    for cmd in ["ingest", "retarget", "ik-track"] {
        run(cmd);
    }
    let first: Vec<Vec<u8>> = outputs.iter().map(|p| std::fs::read(corpus.join(p)).unwrap()).collect();
    for cmd in ["ingest", "retarget", "ik-track"] {
        run(cmd);
    }
    let second: Vec<Vec<u8>> = outputs.iter().map(|p| std::fs::read(corpus.join(p)).unwrap()).collect();
    assert_eq!(first, second);
    assert_eq!(std::fs::read(corpus.join("midi/train_0.mid")).unwrap(), midi_before);

    let o = pianist(&["--config", cfg.to_str().unwrap(), "play", "--mode", "nominal"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = stdout_json(&o);
    assert_eq!(rows.as_array().unwrap().len(), 2);
    let o = pianist(&["--config", cfg.to_str().unwrap(), "report"]);
    assert!(o.status.success());
    let svg = std::fs::read_to_string(corpus.join("out/report/nominal/train_0.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let table = std::fs::read_to_string(corpus.join("out/report/nominal/metrics.csv")).unwrap();
    assert!(table.starts_with("song,precision,recall,f1,tp,fp,fn\n"));
}
