use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soc-verify")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn entry<'a>(r: &'a Value, name: &str) -> &'a Value {
    r["entries"].as_array().unwrap().iter().find(|e| e["name"] == name).unwrap()
}

#[test]
fn pe_short_horizon_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["check", "--problem", "pe", "--T", "0.1", "--grid", "200", "--samples", "100", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["schema"], 1);
    assert_eq!(r["overall"], "satisfied");
    let suf = entry(&r, "integral_sufficient");
    assert_eq!(suf["verdict"], "satisfied");
    assert!(suf["margin"].as_f64().unwrap() > 0.0);
}

#[test]
fn pe_unit_horizon_is_violated_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["check", "--problem", "pe", "--T", "1.0", "--grid", "200", "--samples", "100", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let r = report(&out);
    let nec = entry(&r, "integral_necessary");
    assert_eq!(nec["verdict"], "violated");
    let w = &nec["witnesses"]["direction"];
    // normalized multiplier, gamma 1 witness
    assert!(w["omega_p2"].as_f64().unwrap() <= -7.0 / 120.0);
    assert!((w["gamma"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn usage_errors_exit_3() {
    assert_eq!(code(&run(&["check", "--problem", "nosuch.json"])), 3);
    assert_eq!(code(&run(&["check", "--problem", "pe", "--grid", "1"])), 3);
    assert_eq!(code(&run(&["check", "--problem", "pe", "--tol", "-1"])), 3);
    assert_eq!(code(&run(&["check", "--problem", "pe", "--mode", "everything"])), 3);
    assert_eq!(code(&run(&["check"])), 3);
    assert_eq!(code(&run(&["frobnicate"])), 3);
    let o = run(&["check", "--problem", "zzz"]);
    let msg = String::from_utf8_lossy(&o.stderr);
    for n in ["pe", "lq-decoupled", "goh-violator", "lc-violator"] {
        assert!(msg.contains(n), "{msg}");
    }
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_soc-verify"))
        .args(["check", "--problem", "pe", "--grid", "20"])
        .env("SOC_VERIFY_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let outs: Vec<_> = ["1", "3"]
        .iter()
        .map(|threads| {
            let out = dir.path().join(format!("r{threads}.json"));
            let o = Command::new(env!("CARGO_BIN_EXE_soc-verify"))
                .args(["check", "--problem", "cubic", "--grid", "120", "--samples", "200", "--seed", "9"])
                .args(["--out", out.to_str().unwrap()])
                .env("SOC_VERIFY_THREADS", threads)
                .output()
                .unwrap();
            assert_eq!(code(&o), 0);
            fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn negative_controls() {
    let o = run(&["check", "--problem", "goh-violator", "--grid", "100", "--json"]);
    assert_eq!(code(&o), 1);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(entry(&r, "goh_symmetry")["verdict"], "violated");
    assert_eq!(entry(&r, "integral_sufficient")["verdict"], "not_applicable");
    let o = run(&["check", "--problem", "lc-violator", "--grid", "100", "--json"]);
    assert_eq!(code(&o), 1);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(entry(&r, "legendre_clebsch")["verdict"], "violated");
}

#[test]
fn problem_file_and_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let pf = dir.path().join("pe.json");
    fs::write(&pf, soc_verify_core::registry::pe(0.1).to_json()).unwrap();
    let csv = dir.path().join("csv");
    let o = run(&["check", "--problem", pf.to_str().unwrap(), "--grid", "100", "--samples", "50", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.csv", "multiplier_0.csv", "multiplier_0.json", "necessity_witness.csv", "sufficiency_worst.csv"] {
        assert!(csv.join(f).is_file(), "{f}");
    }
    // the exported trajectory is accepted back as a candidate
    let tr = csv.join("trajectory.csv");
    let o = run(&["check", "--problem", "pe", "--T", "0.1", "--trajectory", tr.to_str().unwrap(), "--mode", "multipliers"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run(&["check", "--problem", pf.to_str().unwrap(), "--T", "1"])), 3);
}

#[test]
fn infeasible_trajectory_is_blocked() {
    let dir = tempfile::tempdir().unwrap();
    let tr = dir.path().join("bad.csv");
    let mut text = String::from("t,x1,x2,x3,u1,v1\n");
    for k in 0..=10 {
        text += &format!("{},1,0,0,0,0\n", k as f64 * 0.01);
    }
    fs::write(&tr, text).unwrap();
    let o = run(&["check", "--problem", "pe", "--T", "0.1", "--trajectory", tr.to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 2);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(entry(&r, "integral_sufficient")["verdict"], "blocked");
}

#[test]
fn malformed_inputs_do_not_panic() {
    let dir = tempfile::tempdir().unwrap();
    let pf = dir.path().join("p.json");
    fs::write(&pf, "{\"n\": 2").unwrap();
    let o = run(&["check", "--problem", pf.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let tr = dir.path().join("t.csv");
    fs::write(&tr, "t,x1\n0,zz\n").unwrap();
    let o = run(&["check", "--problem", "pe", "--trajectory", tr.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(!String::from_utf8_lossy(&o.stderr).contains("panicked"));
}

#[test]
fn list_and_simulate() {
    let o = run(&["list"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("lq-decoupled"));
    let o = run(&["check", "--problem", "pe", "--mode", "simulate", "--json"]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["entries"].as_array().unwrap().len(), 1);
}
