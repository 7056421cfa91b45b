use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "fine_n=8",
    "--set", "coarse_n=2",
    "--set", "time.n_steps=30",
    "--set", "time.tau=\"stability\"",
    "--set", "training_prefix=10",
    "--set", "model.d_model=16",
    "--set", "model.d_ff=32",
    "--set", "model.encoder_layers=1",
    "--set", "model.decoder_layers=1",
];

fn hei(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hei"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn print_config_reflects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = hei(dir.path(), &["simulate", "--print-config", "--seed", "7", "--set", "time.n_steps=12"]);
    assert!(out.status.success());
    let cfg = json(&out);
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["time"]["n_steps"], 12);
    assert_eq!(cfg["fine_n"], 40);
    assert!(!dir.path().join("splitting.traj").exists());
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = hei(dir.path(), &["simulate", "--set", "time.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("time.bogus"));

    let out = hei(dir.path(), &["simulate", "--set", "coarse_n=7"]);
    assert_eq!(out.status.code(), Some(2));

    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"fine_n\": 40, \"unknown\": true}").unwrap();
    let out = hei(dir.path(), &["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = hei(dir.path(), &[&["rollout"], TINY].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stderr.starts_with(b"error: "));
}

#[test]
fn oracle_rollout_reproduces_the_splitting() {
    let dir = tempfile::tempdir().unwrap();
    let sim = hei(dir.path(), &[&["simulate"], TINY].concat());
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let s = json(&sim);
    assert_eq!((s["m1"].as_u64(), s["m2"].as_u64()), (Some(27), Some(8)));

    let roll = hei(dir.path(), &[&["rollout", "--oracle-predictor"], TINY].concat());
    assert!(roll.status.success(), "{}", String::from_utf8_lossy(&roll.stderr));
    let r = json(&roll);
    assert_eq!(r["predicted_steps"], 21);
    assert!(r["u1"]["max_l2"].as_f64().unwrap() < 1e-12);

    let csv = std::fs::read_to_string(dir.path().join("rollout_u1_errors.csv")).unwrap();
    let worst = csv
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-12);

    let report = hei(dir.path(), &[&["report"], TINY].concat());
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("rollout"));

    // Results on disk were made with another config.
    let other = hei(dir.path(), &[&["report", "--seed", "99"], TINY].concat());
    assert_eq!(other.status.code(), Some(2));
}
