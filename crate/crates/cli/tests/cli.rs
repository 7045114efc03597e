use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn featvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1));
    serde_json::from_slice(out.stderr.trim_ascii()).expect("stderr is JSON")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("small.json");
    let body = serde_json::json!({
        "cardinalities": [3, 3, 2],
        "map_channels": 16,
        "n_samples": 400,
        "latents": 4,
        "encoder_hidden": [32, 16],
        "decoder_hidden": [16, 32],
        "epochs": 3,
        "batch_size": 64,
        "metrics": ["mig", "sap", "irs"]
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    cfg
}

#[test]
fn help_lists_paper_defaults() {
    let out = featvae(&["train", "--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "[default: 18]",
        "[default: 20]",
        "[default: 0.0001]",
        "[default: 0.12]",
        "[default: 256]",
        "[default: 0.001]",
    ] {
        assert!(help.contains(needle), "missing {needle} in\n{help}");
    }
}

#[test]
fn unknown_config_key_is_a_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"latent": 10}"#).unwrap();
    let out = featvae(&["pipeline", "--output", path(&dir.path().join("run")), "--config", path(&cfg)]);
    let err = stderr_json(&out);
    assert_eq!(err["error"], "json");
    assert!(err["message"].as_str().unwrap().contains("unknown field `latent`"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = featvae(&["synth", "--output", path(&dir.path().join("m.dfm")), "--latents", "0"]);
    let err = stderr_json(&out);
    assert!(err["message"].as_str().unwrap().contains("latent"));

    let out = featvae(&["pipeline", "--output", path(dir.path()), "--metrics", "mig,nope"]);
    assert!(!out.status.success());
}

#[test]
fn missing_input_reports_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = featvae(&[
        "aggregate",
        "--input",
        path(&dir.path().join("absent.dfm")),
        "--output",
        path(&dir.path().join("v.dfm")),
    ]);
    let err = stderr_json(&out);
    assert!(err["message"].as_str().unwrap().contains("absent.dfm"));
}

#[test]
fn staged_commands_reproduce_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let cfg = path(&cfg);

    let whole = stdout_json(&featvae(&["pipeline", "--output", path(&d.join("run")), "--config", cfg, "--seed", "4"]));
    for file in ["maps.dfm", "vectors.dfm", "model.ckpt", "history.json", "report.json", "baseline_report.json"] {
        assert!(d.join("run").join(file).exists(), "{file} missing");
    }
    let mig = whole["report"]["mig"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mig));
    assert!(whole["report"]["factorvae"].is_null());

    let synth = stdout_json(&featvae(&["synth", "--output", path(&d.join("m.dfm")), "--config", cfg, "--seed", "4"]));
    assert_eq!(synth["n"], 400);
    stdout_json(&featvae(&[
        "aggregate",
        "--input",
        path(&d.join("m.dfm")),
        "--output",
        path(&d.join("v.dfm")),
        "--config",
        cfg,
        "--seed",
        "4",
    ]));
    let train = stdout_json(&featvae(&[
        "train",
        "--input",
        path(&d.join("v.dfm")),
        "--output",
        path(&d.join("model")),
        "--config",
        cfg,
        "--seed",
        "4",
    ]));
    assert_eq!(train["history"].as_array().unwrap().len(), 3);
    let report = stdout_json(&featvae(&[
        "eval",
        "--checkpoint",
        path(&d.join("model").join("model.ckpt")),
        "--input",
        path(&d.join("v.dfm")),
        "--output",
        path(&d.join("report.json")),
        "--config",
        cfg,
        "--seed",
        "4",
    ]));
    assert_eq!(report, whole["report"]);
    assert_eq!(
        std::fs::read(d.join("model").join("model.ckpt")).unwrap(),
        std::fs::read(d.join("run").join("model.ckpt")).unwrap()
    );
}
