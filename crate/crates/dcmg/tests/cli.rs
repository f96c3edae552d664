mod common;

use std::process::Command;

fn dcmg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dcmg")).args(args).output().unwrap()
}

#[test]
fn dispatch_prints_the_optimum() {
    let path = common::shipped();
    let out = dcmg(&["dispatch", "--scenario", path.to_str().unwrap(), "--demand", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("lambda_opt = "));
    assert_eq!(text.lines().filter(|l| l.starts_with("DG")).count(), 6);
}

#[test]
fn equilibrium_matches_the_consensus_cost() {
    let path = common::shipped();
    let out = dcmg(&["equilibrium", "--scenario", path.to_str().unwrap(), "--no-cpl", "--unplug", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda_opt = 1.2978"), "{text}");
    assert!(text.contains("DG4  unplugged"));
}

#[test]
fn simulate_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::shipped_json();
    v["simulation"]["horizon"] = serde_json::json!(0.2);
    v["events"] = serde_json::json!([{ "action": "enable_secondary", "time": 0.1 }]);
    let scenario = dir.path().join("short.json");
    std::fs::write(&scenario, serde_json::to_string(&v).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = dcmg(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--integrator",
        "trapezoidal",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trajectory.csv", "events.csv", "summary.txt"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t[s],V_gen_1[V]"));
}

#[test]
fn bad_input_exits_with_two() {
    let out = dcmg(&["simulate", "--scenario", "/nonexistent.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent.json"));

    let out = dcmg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let path = common::shipped();
    let out = dcmg(&["equilibrium", "--scenario", path.to_str().unwrap(), "--unplug", "7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_criterion_exits_with_one() {
    // A 1 ms settling window is far shorter than the consensus transient.
    let dir = tempfile::tempdir().unwrap();
    let mut v = common::shipped_json();
    v["simulation"] = serde_json::json!({ "horizon": 8.0, "integrator": "trapezoidal", "dt": 1e-4 });
    v["events"] = serde_json::json!([{ "action": "cpl", "time": 0.0, "on": false }, { "action": "enable_secondary", "time": 1.0 }]);
    v["verify"] = serde_json::json!({ "settle_time": 0.001, "perturbation_runs": 0, "dispatch_cases": 2, "extension": 1.0 });
    let scenario = dir.path().join("strict.json");
    std::fs::write(&scenario, serde_json::to_string(&v).unwrap()).unwrap();
    let out = dcmg(&["verify", "--scenario", scenario.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1), "{text}");
    assert!(text.contains("[FAIL] 1."), "{text}");
}
