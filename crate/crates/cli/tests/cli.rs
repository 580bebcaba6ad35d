use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcl")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) {
    let cfg = r#"{
        "seed": 1,
        "train": { "epochs": 3 },
        "synth": { "tasks": 3, "samples_per_class": 40, "holdout_classes": 5 },
        "paths": { "out_dir": "out" }
    }"#;
    fs::write(dir.join("c.json"), cfg).unwrap();
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcl(dir.path(), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hcl(dir.path(), &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&hcl(dir.path(), &["--config", "absent.json", "train"])), 2);
}

#[test]
fn train_without_any_output_path_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcl(dir.path(), &["train"]);
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn bad_config_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"train": {"epochs": 0}}"#).unwrap();
    assert_eq!(code(&hcl(dir.path(), &["--config", "c.json", "gen", "--out", "o"])), 2);
    fs::write(dir.path().join("c.json"), r#"{"unknown": 1}"#).unwrap();
    assert_eq!(code(&hcl(dir.path(), &["--config", "c.json", "gen", "--out", "o"])), 2);
}

#[test]
fn theorem_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcl(dir.path(), &["check-theorems", "--random-tables", "10000"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("CIL bound violations     0"));
}

#[test]
fn seeded_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let args = ["--config", "c.json", "--seed", "7", "train", "--state", "a.json", "--metrics", "ma.json"];
    assert_eq!(code(&hcl(dir.path(), &args)), 0);
    let args = ["--config", "c.json", "--seed", "7", "train", "--state", "b.json", "--metrics", "mb.json"];
    assert_eq!(code(&hcl(dir.path(), &args)), 0);
    assert_eq!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
    assert_eq!(fs::read(dir.path().join("ma.json")).unwrap(), fs::read(dir.path().join("mb.json")).unwrap());
    let args = ["--config", "c.json", "--seed", "8", "train", "--state", "c.json.state", "--metrics", "mc.json"];
    assert_eq!(code(&hcl(dir.path(), &args)), 0);
    assert_ne!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("c.json.state")).unwrap());
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    let c = ["--config", "c.json"];
    let run = |extra: &[&str]| hcl(d, &[&c[..], extra].concat());

    assert_eq!(code(&run(&["gen"])), 0);
    for f in ["train.hide", "test.hide", "holdout.hide"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }

    // train from the generated files rather than the in-memory stream
    let cfg = r#"{
        "seed": 1,
        "train": { "epochs": 3 },
        "paths": { "train_data": "out/train.hide", "test_data": "out/test.hide", "out_dir": "out" }
    }"#;
    fs::write(d.join("files.json"), cfg).unwrap();
    let o = hcl(d, &["--config", "files.json", "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("FAA"));

    let o = hcl(d, &["--config", "files.json", "eval"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final row reproduced"));
    let o = hcl(d, &["--config", "files.json", "eval", "--test", "out/test.hide"]);
    assert_eq!(code(&o), 0);

    let o = run(&["report", "--metrics", "out/metrics.json", "--svg", "out/m.svg"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("CAA"));
    assert!(fs::read_to_string(d.join("out/m.svg")).unwrap().starts_with("<svg"));

    let o = run(&["predict", "--input", "out/test.hide"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 48);
    assert!(lines.iter().all(|v| v["class_id"].is_u64() && v["task"].is_u64()));

    let o = run(&["check-theorems", "--random-tables", "50", "--state", "out/state.json", "--test", "out/test.hide"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("holds        true"));

    let o = run(&["fewshot", "--pool", "out/holdout.hide", "--episodes", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("5-way 5-shot over 3 episodes"));
    // the stream's own classes are not a valid pool
    assert_eq!(code(&run(&["fewshot", "--pool", "out/test.hide", "--episodes", "1", "--k-shot", "1", "--query", "1"])), 1);
}

#[test]
fn eval_on_other_data_fails_the_reproduction_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    assert_eq!(code(&hcl(d, &["--config", "c.json", "--seed", "5", "gen"])), 0);
    assert_eq!(code(&hcl(d, &["--config", "c.json", "--seed", "6", "train"])), 0);
    let o = hcl(d, &["--config", "c.json", "eval", "--test", "out/test.hide"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("check failed"));
}

#[test]
fn report_rejects_a_malformed_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.json"), "{\"matrix\": [[0.5, 0.5]]}").unwrap();
    assert_eq!(code(&hcl(dir.path(), &["report", "--metrics", "m.json"])), 2);
}
