use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn srnas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srnas"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SRNAS_RUN_ROOT")
        .output()
        .expect("spawn srnas")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

fn write_genome(dir: &Path, name: &str, space: &str, decisions: &[usize]) {
    let doc = serde_json::json!({ "schema": 1, "space": space, "decisions": decisions });
    std::fs::write(dir.join(name), doc.to_string()).unwrap();
}

fn write_png(path: &Path) {
    let values: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 17) as f32 / 16.0).collect();
    let img = srnas::tensorkit::Tensor::from_vec(&[3, 8, 8], values).unwrap();
    srnas::data::write_png(&img, path).unwrap();
}

#[test]
fn cost_prints_a_cost_report() {
    let dir = tempfile::tempdir().unwrap();
    write_genome(dir.path(), "g.json", "generator", &[0; 20]);
    let doc = stdout_json(&srnas(dir.path(), &["cost", "--genome", "g.json", "--scale", "2"]));
    let sum: u64 = doc["breakdown"].as_array().unwrap().iter().map(|e| e["mult_adds"].as_u64().unwrap()).sum();
    assert_eq!(doc["mult_adds"].as_u64(), Some(sum));
    assert!(doc["params"].as_u64().unwrap() > 0);
}

#[test]
fn cost_accepts_discriminator_genomes() {
    let dir = tempfile::tempdir().unwrap();
    write_genome(dir.path(), "d.json", "discriminator", &[1, 1, 7, 1, 1, 1, 13, 0, 15, 0]);
    let doc = stdout_json(&srnas(dir.path(), &["cost", "--genome", "d.json", "--patch", "64"]));
    assert!(doc["mult_adds"].as_u64().unwrap() > 0);
}

#[test]
fn invalid_genome_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write_genome(dir.path(), "g.json", "generator", &[0, 0]);
    let out = srnas(dir.path(), &["cost", "--genome", "g.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["exit_code"], 2);
}

#[test]
fn missing_file_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = srnas(dir.path(), &["cost", "--genome", "absent.json"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unknown_override_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = srnas(dir.path(), &["--set", "generator_search.nope=3", "config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("nope"));
}

#[test]
fn override_changes_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let doc = stdout_json(&srnas(dir.path(), &["--preset", "smoke", "--set", "generator_search.steps=7", "config"]));
    assert_eq!(doc["generator_search"]["steps"], 7);
    let out = srnas(dir.path(), &["--set", "generator_search.steps=0", "config"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = srnas(dir.path(), &["--preset", "smoke", "config"]);
    std::fs::write(dir.path().join("c.json"), &out.stdout).unwrap();
    let again = srnas(dir.path(), &["--config", "c.json", "config"]);
    assert_eq!(stdout_json(&out), stdout_json(&again));
}

#[test]
fn eval_identical_images_reports_psnr_cap() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("a.png"));
    let doc = stdout_json(&srnas(dir.path(), &["eval", "--pred", "a.png", "--target", "a.png"]));
    assert_eq!(doc["psnr"].as_f64(), Some(100.0));
    assert_eq!(doc["feature_distance"].as_f64(), Some(0.0));
}

#[test]
fn later_phases_require_earlier_ones() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["search-disc", "finetune-gan", "train"] {
        let out = srnas(dir.path(), &["--preset", "smoke", cmd]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
}

#[test]
fn smoke_run_replays_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let run = srnas(dir.path(), &["--preset", "smoke", "--run-dir", "r", "run", "--csv", "log.csv"]);
    let doc = stdout_json(&run);
    assert_eq!(doc["interrupted"], false);
    assert!(doc["manifest"]["generator_genome"].is_object());

    let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let rows = csv.lines().count() - 1;
    assert!(csv.starts_with("space,step,"));

    let ok = srnas(dir.path(), &["--run-dir", "r", "replay"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(String::from_utf8_lossy(&ok.stdout).trim(), format!("OK, {rows} records verified"));

    // Resuming a finished run changes nothing.
    let manifest = std::fs::read(dir.path().join("r/manifest.json")).unwrap();
    let again = stdout_json(&srnas(dir.path(), &["--preset", "smoke", "--run-dir", "r", "run"]));
    assert_eq!(again["manifest"], doc["manifest"]);
    assert_eq!(std::fs::read(dir.path().join("r/manifest.json")).unwrap(), manifest);

    let samples = srnas(dir.path(), &["sample", "--checkpoint", "r/controller.ckpt", "--count", "3"]);
    assert!(samples.status.success());
    let lines: Vec<Value> =
        String::from_utf8_lossy(&samples.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["genome"]["space"], "generator");

    let log = dir.path().join("r/search_log.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    let mut records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let idx = records.iter().position(|r| r["reward"].is_f64() && r["step"].as_u64() > Some(3)).unwrap();
    let step = records[idx]["step"].as_u64().unwrap();
    let reward = records[idx]["reward"].as_f64().unwrap();
    records[idx]["reward"] = (reward + 1e-3).into();
    let edited: String = records.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(&log, edited).unwrap();

    let bad = srnas(dir.path(), &["--run-dir", "r", "replay"]);
    assert!(!bad.status.success());
    let err = stderr_json(&bad);
    assert_eq!(err["step"].as_u64(), Some(step));
    assert!(err["message"].as_str().unwrap().contains(&format!("step {step}")));
}

#[test]
fn phases_run_separately_match_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let single = stdout_json(&srnas(dir.path(), &["--preset", "smoke", "--run-dir", "a", "run"]));
    for cmd in ["search-gen", "train", "search-disc", "finetune-gan"] {
        let out = srnas(dir.path(), &["--preset", "smoke", "--run-dir", "b", cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |p: &str| -> Value { serde_json::from_slice(&std::fs::read(dir.path().join(p)).unwrap()).unwrap() };
    assert_eq!(read("a/manifest.json"), read("b/manifest.json"));
    assert!(single["manifest"].is_object());
}

#[test]
fn trains_and_evaluates_a_given_genome() {
    let dir = tempfile::tempdir().unwrap();
    write_genome(dir.path(), "g.json", "generator", &[2, 0, 2, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    let doc = stdout_json(&srnas(
        dir.path(),
        &["--preset", "smoke", "--run-dir", "r", "train", "--genome", "g.json", "--scale", "2"],
    ));
    let snap = doc["snapshot"].as_str().unwrap().to_string();
    let eval = stdout_json(&srnas(dir.path(), &["--preset", "smoke", "eval", "--snapshot", &snap]));
    assert_eq!(eval["scale"], 2);
    assert!((eval["psnr"].as_f64().unwrap() - doc["psnr"].as_f64().unwrap()).abs() < 1e-6);
}
