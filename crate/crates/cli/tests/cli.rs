use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn feddm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feddm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const SMOKE: &str = "rounds = 2\niterations = 50\nclients = 5\nalpha = 0.5\nipc = 5\nclient_lr = 0.1\nserver_epochs = 100\nhidden = [32]\n";

#[test]
fn smoke_run_writes_artifacts_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    write(&cfg, SMOKE);
    let out = dir.path().join("out");
    let start = Instant::now();
    let o = feddm(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", "2"]);
    let took = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(took < 60.0, "smoke run took {took:.1} s");
    for f in ["history.csv", "config.toml", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("round,protocol,floats_uploaded,cumulative_floats,test_accuracy,sigma,epsilon,delta,wall_ms\n"));

    let again = dir.path().join("again");
    let o = feddm(&[
        "run",
        "--manifest",
        out.join("manifest.json").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("history.csv")).unwrap(), std::fs::read(again.join("history.csv")).unwrap());
    assert!(!std::fs::read(out.join("config.toml")).unwrap().is_empty());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, "protocol = \"fedavg\"\nrounds = 2\nclients = 3\nlocal_epochs = 1\nhidden = [8]\nblob_per_class = 30\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(feddm(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(feddm(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "9"]).status.success());
    let manifest = std::fs::read_to_string(b.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"));
}

#[test]
fn exit_codes_separate_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    write(&bad, "rounds = -1\n");
    let o = feddm(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rounds"));

    let o = feddm(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let data = dir.path().join("data.toml");
    write(
        &data,
        "dataset = \"idx\"\ntrain_images = \"/nonexistent/a\"\ntrain_labels = \"/nonexistent/b\"\ntest_images = \"/nonexistent/c\"\ntest_labels = \"/nonexistent/d\"\n",
    );
    let o = feddm(&["run", "--config", data.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    assert_eq!(feddm(&["run", "--bogus"]).status.code(), Some(2));
}

#[test]
fn msgsize_reports() {
    let o = feddm(&["msgsize", "--cpc", "9,9,9,9,9,9,9,9,9,9", "--ipc", "10", "--floats", "3072", "--params", "320010"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("2764800"));
    assert!(text.contains("3200100"));

    let o = feddm(&["msgsize", "--fixture", "mnist-dir0.5", "--csv"]);
    assert!(stdout(&o).contains("round_total,,,635040"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, "clients = 4\nipc = 3\n");
    let o = feddm(&["msgsize", "--config", cfg.to_str().unwrap(), "--rounds", "20"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("over 20 rounds"));
}

#[test]
fn calibrate_dp_prints_sigmas() {
    let o = feddm(&["calibrate-dp", "--epsilon", "1", "--delta", "1e-5"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("4.844"));
    let o = feddm(&["calibrate-dp", "--epsilon", "2", "--delta", "1e-5", "--q", "0.01", "--steps", "100"]);
    assert!(stdout(&o).contains("2.405"));
    assert_eq!(feddm(&["calibrate-dp", "--epsilon", "0", "--delta", "1e-5"]).status.code(), Some(3));
}

#[test]
fn partition_stats_lists_clients() {
    let o = feddm(&["partition-stats", "--alpha", "0.1", "--clients", "6", "--seed", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("K=6, alpha=0.1, seed=3"));
    assert!(text.lines().any(|l| l.starts_with("5,")));
    assert!(text.contains("mean effective classes"));
}
