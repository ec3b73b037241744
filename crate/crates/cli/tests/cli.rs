use std::path::Path;
use std::process::{Command, Output};

fn klab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klab"))
        .args(args)
        .env_remove("KLAB_SEED")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn records(path: &str) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn verify_mse_with_passing_tolerances_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c",
        "mse.sets=2\nmse.trials=20000\nmse.rel_tolerance=0.5\n",
    );
    let out = dir.path().join("r.json").display().to_string();
    let o = klab(&["verify-mse", "--config", &cfg, "--out", &out]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let recs = records(&out);
    assert_eq!(recs.len(), 6);
    for key in [
        "variant",
        "L",
        "seed",
        "metric",
        "value",
        "config_hash",
        "code_version",
    ] {
        assert!(recs[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn failing_tolerances_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // A zero tolerance cannot be met by any finite Monte Carlo run.
    let cfg = write(
        dir.path(),
        "c",
        "mse.sets=1\nmse.trials=10000\nmse.rel_tolerance=0\n",
    );
    let o = klab(&["verify-mse", "--config", &cfg, "--out", "-"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_exits_one_naming_the_path() {
    let o = klab(&[
        "kernel-check",
        "--config",
        "/no/such/klab.conf",
        "--out",
        "-",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/klab.conf"));
}

#[test]
fn unknown_flag_prints_usage_and_exits_64() {
    let o = klab(&["bench", "--config", "x", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(klab(&["no-such-command"]).status.code(), Some(64));
}

#[test]
fn bench_lengths_give_two_rows_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c", "bench.trials=1\nbench.heads=1\n");
    let out = dir.path().join("b.json").display().to_string();
    let o = klab(&[
        "bench",
        "--config",
        &cfg,
        "--out",
        &out,
        "--lengths",
        "256,512",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let recs = records(&out);
    // Six kernelized variants plus the softmax baseline.
    assert_eq!(recs.len(), 2 * 7);
    let lengths: Vec<u64> = recs.iter().map(|r| r["L"].as_u64().unwrap()).collect();
    assert!(lengths.iter().all(|&l| l == 256 || l == 512));
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c",
        "seed=3\nkernel.pairs=1\nkernel.num_samples=64\nkernel.self_similarity_points=5\n",
    );
    let seed_of = |o: Output| -> u64 {
        let line = String::from_utf8(o.stdout).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        first["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(klab(&["kernel-check", "--config", &cfg])), 3);
    let env = Command::new(env!("CARGO_BIN_EXE_klab"))
        .args(["kernel-check", "--config", &cfg])
        .env("KLAB_SEED", "8")
        .output()
        .unwrap();
    assert_eq!(seed_of(env), 8);
    let both = Command::new(env!("CARGO_BIN_EXE_klab"))
        .args(["kernel-check", "--config", &cfg, "--seed", "11"])
        .env("KLAB_SEED", "8")
        .output()
        .unwrap();
    assert_eq!(seed_of(both), 11);
}
