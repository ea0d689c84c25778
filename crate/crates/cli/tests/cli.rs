use std::path::Path;
use std::process::{Command, Output};

fn nowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nowcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_rejected() {
    let out = nowcast(&["train", "--no-such-flag"]);
    assert!(!out.status.success());
}

#[test]
fn weights_outside_the_open_interval_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = nowcast(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--beta", "1.0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_passes_and_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--instances", "2", "--out", s(dir.path())]);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
    assert!(dir.path().join("gradcheck.json").exists());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, runs, eval) = (dir.path().join("data"), dir.path().join("runs"), dir.path().join("eval"));
    ok(&["gen-data", "--preset", "translate", "--out", s(&data), "--grid", "16", "--length", "160", "--seed", "3"]);
    assert!(data.join("manifest.json").exists());

    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        "batch_size = 4\nmax_batches = 2\n\n[model]\ndepth = 2\nbase_channels = 4\n\n\
         [[stages]]\nstage = \"mf\"\nepochs = 1\nlr = 0.001\npatience = 10\n\n\
         [[stages]]\nstage = \"af\"\nepochs = 1\nlr = 0.001\npatience = 10\n\n\
         [[stages]]\nstage = \"joint\"\nepochs = 1\nlr = 0.0001\npatience = 10\n",
    )
    .unwrap();
    for model in ["lupin", "rainnet"] {
        ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&runs), "--model", model]);
    }
    let manifest = std::fs::read_to_string(runs.join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));

    let lupin = runs.join("lupin.ckpt");
    ok(&["evaluate", "--models", s(&lupin), s(&runs.join("rainnet.ckpt")), "--data", s(&data), "--out", s(&eval)]);
    let scores = std::fs::read_to_string(eval.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 2 * 66);

    let input = std::fs::read_dir(data.join("test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_str().unwrap().ends_with("seg000.rfs"))
        .unwrap();
    let forecast = dir.path().join("forecast.rfs");
    ok(&["nowcast", "--model", s(&lupin), "--input", s(&input), "--leads", "3", "--out", s(&forecast)]);
    assert!(forecast.exists());
    assert!(forecast.with_extension("manifest.json").exists());

    let zero = nowcast(&["nowcast", "--model", s(&lupin), "--input", s(&input), "--leads", "0", "--out", s(&forecast)]);
    assert!(!zero.status.success());
}
