use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adam"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "not a single line: {s:?}");
    s.trim_end().to_string()
}

const SMALL: &str = r#"
seed = 4
[data]
zoo_per_class = 12
server_system = 5
server_benign_extras = 5
server_malware = 10
n_clients = 2
client_labeled = 4
client_unlabeled = 3
"#;

#[test]
fn federate_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = adam(dir.path(), &["federate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("E_USAGE: "));
}

#[test]
fn missing_checkpoints_fail_with_code() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        &["train-zoo"][..],
        &["pseudo-eval"],
        &["federate", "--seed", "1"],
    ] {
        let out = adam(dir.path(), cmd);
        assert_eq!(out.status.code(), Some(1));
        assert!(stderr_line(&out).starts_with("E_MISSING_ARTIFACT: "));
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[federation]\nrounds = 3\nspeed = 9\n").unwrap();
    let out = adam(
        dir.path(),
        &["show-config", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("E_CONFIG: "));
}

#[test]
fn inconsistent_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = adam(
        dir.path(),
        &[
            "federate",
            "--seed",
            "1",
            "--clients",
            "3",
            "--clients-per-round",
            "5",
        ],
    );
    assert!(stderr_line(&out).starts_with("E_CONFIG: "));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = adam(d, &["gen-data", "--config", c]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
    }
    for name in [
        "train.adfp",
        "server.adfp",
        "client-0.adfp",
        "client-1.adfp",
    ] {
        let x = fs::read(a.join("data").join(name)).unwrap();
        let y = fs::read(b.join("data").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn attack_bench_prints_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let out = adam(
        dir.path(),
        &["attack-bench", "--draws", "5000", "--seed", "3"],
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let density = v["feature_density"].as_f64().unwrap();
    assert!((density - 0.5).abs() < 0.03);
    assert!(dir.path().join("attack_bench.json").exists());
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = adam(
        dir.path(),
        &["show-config", "--scale", "paper", "--clients", "5"],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("scale = \"paper\""));
    assert!(text.contains("n_clients = 5"));
    let cfg = dir.path().join("echo.toml");
    fs::write(&cfg, &text).unwrap();
    let again = adam(
        dir.path(),
        &["show-config", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn help_succeeds() {
    let out = Command::new(env!("CARGO_BIN_EXE_adam"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-data",
        "train-zoo",
        "pseudo-eval",
        "train-guards",
        "federate",
        "attack-bench",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}
