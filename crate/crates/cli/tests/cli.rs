//! Drives the installed binary end to end: flag/file/env precedence, the
//! run-config echo, exit codes, and the stderr error JSON.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_precedent"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(args)
        .args(["--out-dir", dir.to_str().unwrap()])
        .env_remove("PRECEDENT_OUT_DIR");
    cmd.output().expect("binary should spawn")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Parses the single-line error object the binary prints on stderr.
fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let value: Value = serde_json::from_str(text.trim())
        .unwrap_or_else(|e| panic!("stderr is not an error JSON ({e}): {text}"));
    value["error"].clone()
}

fn read_json(path: &Path) -> Value {
    let text =
        fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn echo_of(dir: &Path) -> Value {
    read_json(&dir.join("run_config.json"))
}

/// Small corpus: 12 train, 4 test, every test citing 3 train cases, so the
/// precedent filter keeps both splits nonempty.
const SMALL_SYNTH: &[&str] = &[
    "synth",
    "--seed",
    "5",
    "--k",
    "2",
    "--n-train",
    "12",
    "--n-test",
    "4",
    "--d1",
    "8",
    "--cite-per-test",
    "3",
];

#[test]
fn help_and_version_exit_zero() {
    let help = bin().arg("--help").output().expect("binary should spawn");
    assert_exit(&help, 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for subcommand in ["synth", "ingest", "filter", "train", "influence", "report"] {
        assert!(text.contains(subcommand), "help does not mention {subcommand}:\n{text}");
    }

    let version = bin().arg("--version").output().expect("binary should spawn");
    assert_exit(&version, 0);
}

#[test]
fn missing_required_value_names_the_flag_and_the_config_key() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["ingest"]);
    assert_exit(&out, 2);
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "config");
    assert_eq!(err["exit"], 2);
    let message = err["message"].as_str().unwrap();
    assert!(message.contains("--input"), "message: {message}");
    assert!(message.contains("ingest.input"), "message: {message}");
}

#[test]
fn stage_run_before_its_inputs_exist_is_a_missing_artifact() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["correlate"]);
    assert_exit(&out, 3);
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "missing_artifact");
    assert_eq!(err["exit"], 3);
    assert!(err["message"].as_str().unwrap().contains(dir.path().to_str().unwrap()));
}

#[test]
fn bad_enum_flag_is_rejected_with_the_choices() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["label", "--scope", "everything"]);
    assert_exit(&out, 2);
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "config");
    let message = err["message"].as_str().unwrap();
    assert!(message.contains("cited") && message.contains("claimed"), "message: {message}");
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synthh": {"k": 2}}"#).unwrap();
    let out = run(dir.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert_exit(&out, 2);
    let message = stderr_error(&out)["message"].as_str().unwrap().to_string();
    assert!(message.contains("config file"), "message: {message}");
    assert!(message.contains("synthh"), "message: {message}");
}

#[test]
fn config_file_enum_values_are_validated() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"filter": {"cited_by": "bogus"}}"#).unwrap();
    // The value is checked before the stage touches any artifact, so an
    // empty run directory still reports a config error, not a missing input.
    let out = run(dir.path(), &["filter", "--config", cfg.to_str().unwrap()]);
    assert_exit(&out, 2);
    let message = stderr_error(&out)["message"].as_str().unwrap().to_string();
    assert!(message.contains("filter.cited_by"), "message: {message}");
    assert!(message.contains("\"bogus\""), "message: {message}");
    assert!(message.contains("test") && message.contains("any"), "message: {message}");
}

#[test]
fn flags_override_file_values_and_the_echo_records_sources() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"k": 3, "noise_sigma": 0.2}}"#).unwrap();
    let out = run(
        dir.path(),
        &[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--k",
            "2",
            "--n-train",
            "24",
            "--n-test",
            "8",
            "--cite-per-test",
            "3",
        ],
    );
    assert_exit(&out, 0);
    assert!(dir.path().join("corpus.jsonl").exists());

    let echo = echo_of(dir.path());
    assert_eq!(echo["command"], "synth");
    assert_eq!(echo["resolved"]["k"], 2);
    assert_eq!(echo["resolved"]["noise_sigma"], 0.2);
    assert_eq!(echo["sources"]["synth.k"], "flag");
    assert_eq!(echo["sources"]["synth.noise_sigma"], "file");
    assert_eq!(echo["sources"]["synth.claim_rate"], "default");
    assert_eq!(echo["sources"]["out_dir"], "flag");
}

#[test]
fn out_dir_env_var_is_used_when_no_flag_is_given() {
    let dir = TempDir::new().unwrap();
    let elsewhere = TempDir::new().unwrap();
    let out = bin()
        .args(SMALL_SYNTH)
        .env("PRECEDENT_OUT_DIR", dir.path())
        .current_dir(elsewhere.path())
        .output()
        .expect("binary should spawn");
    assert_exit(&out, 0);
    assert!(dir.path().join("corpus.jsonl").exists());
    assert!(!elsewhere.path().join("corpus.jsonl").exists());

    let echo = echo_of(dir.path());
    assert_eq!(echo["sources"]["out_dir"], "env");
    assert_eq!(echo["resolved"]["seed"], 5);
    assert_eq!(echo["sources"]["synth.seed"], "flag");
}

#[test]
fn linear_head_conflicts_with_a_hidden_width() {
    let dir = TempDir::new().unwrap();
    assert_exit(&run(dir.path(), SMALL_SYNTH), 0);
    assert_exit(&run(dir.path(), &["filter"]), 0);
    let out = run(dir.path(), &["train", "--linear", "true", "--d2", "16"]);
    assert_exit(&out, 2);
    let message = stderr_error(&out)["message"].as_str().unwrap().to_string();
    assert!(message.contains("conflicting values"), "message: {message}");
}

#[test]
fn config_hash_ignores_where_the_run_lives() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    assert_exit(&run(a.path(), SMALL_SYNTH), 0);
    assert_exit(&run(b.path(), SMALL_SYNTH), 0);

    let mut changed_seed: Vec<&str> = SMALL_SYNTH.to_vec();
    changed_seed[2] = "6";
    assert_exit(&run(c.path(), &changed_seed), 0);

    let (ea, eb, ec) = (echo_of(a.path()), echo_of(b.path()), echo_of(c.path()));
    assert_eq!(ea["config_hash"], eb["config_hash"]);
    assert_ne!(ea["config_hash"], ec["config_hash"]);
    assert_ne!(ea["out_dir"], eb["out_dir"]);
    let hash = ea["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|ch| ch.is_ascii_hexdigit()));
}
