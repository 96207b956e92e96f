use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fluidbeam_bench::{median, quantile, scenario_digest, RunRecord, SchemeName, CSV_HEADER};
use fluidbeam_core::channel::Scenario;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fluidbeam")).args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, seed: u64) -> String {
    let p = dir.join(format!("s{seed}.json"));
    ok(&["gen", "--seed", &seed.to_string(), "--out", p.to_str().unwrap()]);
    p.to_str().unwrap().to_owned()
}

fn record(path: &str) -> RunRecord {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_default_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    let digest = ok(&["gen", "--seed", "9", "--out", p.to_str().unwrap()]);
    let s = Scenario::from_json(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(s.geometry.n_t, 4);
    assert_eq!(s.n_users(), 4);
    assert!((s.geometry.width - 0.12).abs() < 1e-15);
    assert_eq!(digest.trim(), scenario_digest(&s));
}

#[test]
fn gen_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["gen", "--seed", "3", "--out", a.to_str().unwrap()]);
    ok(&["gen", "--seed", "3", "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.json");
    ok(&["gen", "--seed", "4", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn gen_honours_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"users": 6}"#).unwrap();
    let p = dir.path().join("s.json");
    ok(&["gen", "--config", cfg.to_str().unwrap(), "--out", p.to_str().unwrap()]);
    let s = Scenario::from_json(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(s.n_users(), 6);
    assert_eq!(s.sinr_thresholds.len(), 6);
}

#[test]
fn fixed_layout_solve_takes_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen(dir.path(), 9);
    let out = dir.path().join("r.json");
    ok(&["solve", &s, "--scheme", "fafp", "--out", out.to_str().unwrap()]);
    let r = record(out.to_str().unwrap());
    assert_eq!(r.scheme, SchemeName::Fafp);
    assert_eq!(r.iterations, 1);
    assert!(r.feasible && r.snr > 0.0);
    assert_eq!(r.layout.len(), 8);
}

#[test]
fn proposed_solve_is_monotone_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen(dir.path(), 9);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["solve", &s, "--scheme", "proposed_perfect", "--max-outer", "10", "--out", a.to_str().unwrap()]);
    ok(&["solve", &s, "--scheme", "proposed_perfect", "--max-outer", "10", "--out", b.to_str().unwrap()]);
    let (a, b) = (record(a.to_str().unwrap()), record(b.to_str().unwrap()));
    assert!(a.trace.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-9)));
    assert_eq!(a.untimed(), b.untimed());
    assert_eq!(a.iterations, a.trace.len());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = bin(&["solve", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = bin(&["gen", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x.json").to_str().unwrap()]);
    assert!(!out.status.success());
    let s = gen(dir.path(), 1);
    assert!(!bin(&["solve", &s, "--xi", "-1"]).status.success());
    assert!(!bin(&["solve", &s, "--scheme", "nonsense"]).status.success());
}

#[test]
fn tiny_sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"axis": "sinr_threshold_db", "values": [10.0], "seeds": 1, "first_seed": 9, "schemes": ["fafp"]}"#).unwrap();
    let out = dir.path().join("out");
    ok(&["sweep", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "1"]);
    let mut rd = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_owned).collect();
    assert_eq!(header, CSV_HEADER);
    let rows: Vec<_> = rd.records().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][1], "fafp");
    assert_eq!(&rows[0][2], "9");
    assert!(out.join("summary.csv").exists());
    let runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let path = runs[0].as_ref().unwrap().path();
    let r = record(path.to_str().unwrap());
    assert_eq!(r.axis_value, Some(10.0));
    let back: RunRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn malformed_sweep_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"axis": "n_users", "values": [2.5], "seeds": 1, "schemes": ["fafp"]}"#).unwrap();
    assert!(!bin(&["sweep", spec.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]).status.success());
    fs::write(&spec, r#"{"axis": "n_users", "values": [2], "seeds": 1, "schemes": ["fafp"], "run": {"typo": 1}}"#).unwrap();
    assert!(!bin(&["sweep", spec.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]).status.success());
}

#[test]
fn quantiles() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
}
