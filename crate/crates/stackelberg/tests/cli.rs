use std::path::Path;
use std::process::{Command, Output};

use stackelberg::linalg::Mat;
use stackelberg::model::{self, CoefficientFn, Definiteness, GameSpec};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackelberg")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(dir: &Path, name: &str, spec: &GameSpec) -> String {
    let p = dir.join(name);
    model::save_spec(spec, &p).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn solve_then_simulate_then_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "game.json", &model::scalar_benchmark(100));
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let s = bin(&["solve", "--config", &cfg, "--out", out]);
    assert_eq!(code(&s), 0, "{}", String::from_utf8_lossy(&s.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&s.stdout).unwrap();
    assert!(summary["leader_cost"]["total"].is_f64());
    for f in ["summary.json", "follower1_p.csv", "leader_p2.csv", "leader_gx.csv", "leader_sigma_tilde.csv"] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }

    let m = bin(&["simulate", "--config", &cfg, "--out", out, "--paths", "1", "--record", "1"]);
    assert_eq!(code(&m), 0, "{}", String::from_utf8_lossy(&m.stderr));
    let sim: serde_json::Value = serde_json::from_slice(&m.stdout).unwrap();
    assert!(sim["leader_cost"]["se"].is_null());
    assert!(Path::new(out).join("path0.csv").exists());

    let c = bin(&["check", "--config", &cfg]);
    assert_eq!(code(&c), 0);
    let table = String::from_utf8(c.stdout).unwrap();
    assert!(table.starts_with("check\tvalue\ttolerance\tstatus"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn simulate_without_artifacts_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "game.json", &model::scalar_benchmark(20));
    let out = dir.path().join("nowhere");
    assert_eq!(code(&bin(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()])), 4);
}

#[test]
fn stale_artifacts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "game.json", &model::scalar_benchmark(20));
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&bin(&["solve", "--config", &cfg, "--out", out])), 0);
    let mut other = model::scalar_benchmark(20);
    other.leader_cost.q = CoefficientFn::scalar(9.0);
    let cfg2 = write(dir.path(), "other.json", &other);
    assert_eq!(code(&bin(&["simulate", "--config", &cfg2, "--out", out, "--paths", "3"])), 4);
}

#[test]
fn singular_leader_noise_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = model::scalar_benchmark(20);
    s.observations.k2 = CoefficientFn::scalar(0.0);
    let cfg = write(dir.path(), "bad.json", &s);
    let o = bin(&["solve", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.json");
    std::fs::write(&p, "{ not json").unwrap();
    assert_eq!(code(&bin(&["check", "--config", p.to_str().unwrap()])), 2);
}

#[test]
fn finite_escape_exits_3_and_reports_the_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = model::scalar_benchmark(200);
    s.grid = model::TimeGrid::new(4.0, 400);
    s.leader_cost.r = CoefficientFn::scalar(-1.0);
    s.leader_cost.g = Mat::from_element(1, 1, 50.0);
    s.leader_definiteness = Definiteness::Indefinite;
    let cfg = write(dir.path(), "escape.json", &s);
    let o = bin(&["solve", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("t ="), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "game.json", &model::scalar_benchmark(50));
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&bin(&["solve", "--config", &cfg, "--out", out])), 0);
    let run = || bin(&["--deterministic", "simulate", "--config", &cfg, "--out", out, "--paths", "300", "--seed", "4"]).stdout;
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}

#[test]
fn formation_demo_writes_its_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    let o = bin(&["formation", "--out", out.to_str().unwrap(), "--paths", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["initial_error"].as_f64().unwrap() - 14.0).abs() < 1e-12);
    assert!(out.join("formation_trace.csv").exists());
}
