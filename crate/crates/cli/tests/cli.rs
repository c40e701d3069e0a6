use std::path::Path;
use std::process::Command;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(
        &path,
        format!(
            r#"
seeds = [1, 2]
output_dir = "{}"

[topology]
groups = [3, 3]

[[delay.group]]
shift = 1.0
rate = 2.0

[delay.global]
shift = 2.0
rate = 1.0

[sync]
s = 3.0

[training]
alpha = 0.1
total_time = 30.0
batch_size = 4

[objective]
kind = "logistic"
regularization = 0.01

[data]
dim = 3
samples_per_client = 10
skew = 0.5
"#,
            dir.join("out").display()
        ),
    )
    .unwrap();
    path
}

fn hfl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hfl"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn run_writes_per_seed_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("elsewhere");
    let o = hfl(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["rounds.csv", "bounds.csv", "summary.csv"] {
        assert!(out.join("seed_7").join(name).exists(), "{name}");
    }
    assert!(!out.join("seed_1").exists());
}

#[test]
fn run_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = hfl(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    for name in ["rounds.csv", "bounds.csv"] {
        assert_eq!(
            std::fs::read(a.join("seed_2").join(name)).unwrap(),
            std::fs::read(b.join("seed_2").join(name)).unwrap()
        );
    }
}

#[test]
fn sweep_fairness_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    let o = hfl(&["sweep", "--config", c, "--axis", "s", "--values", "0,3,6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.path().join("out/sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);

    let o = hfl(&["fairness", "--config", c]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/fairness.csv").exists());

    let o = hfl(&["schedule", "--config", c, "--ramp", "1,3,1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("of 2 seeds"));
    assert!(dir.path().join("out/schedule_summary.csv").exists());
}

#[test]
fn bad_config_reports_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("s = 3.0", "s = -3.0");
    std::fs::write(&cfg, text).unwrap();
    let o = hfl(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("sync.s"));
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert!(
        !hfl(&["sweep", "--config", c, "--axis", "speed", "--values", "1"])
            .status
            .success()
    );
    assert!(!hfl(&["schedule", "--config", c, "--ramp", "1,3"])
        .status
        .success());
    assert!(!hfl(&["schedule", "--config", c, "--ramp", "1,5,1"])
        .status
        .success());
}
