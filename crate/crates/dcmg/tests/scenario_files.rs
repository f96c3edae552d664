mod common;

use common::{shipped, shipped_json};
use dcmg::{parse_scenario, parse_scenario_str, ScenarioError};
use dcmg_core::EventKind;
use proptest::prelude::*;
use serde_json::{json, Value};

fn load(v: &Value) -> Result<dcmg::LoadedScenario, ScenarioError> {
    parse_scenario_str(&serde_json::to_string(v).unwrap(), "test.json")
}

fn invalid(v: &Value) -> (String, String) {
    match load(v) {
        Err(ScenarioError::Invalid { field, message }) => (field, message),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn shipped_scenario_has_expected_shape() {
    let ld = parse_scenario(shipped()).unwrap();
    assert_eq!((ld.spec.n_gens(), ld.spec.n_lines(), ld.spec.n_buses()), (6, 8, 8));
    assert_eq!(ld.cfg.comm.links().len(), 7);
    assert!(ld.cfg.comm.links().iter().all(|&(_, _, w)| w == 2.0));
    assert_eq!(ld.scenario.events.len(), 6);
    assert_eq!(ld.scenario.horizon, 34.0);
    assert_eq!(ld.scenario.events[4].kind, EventKind::UnplugGen(3));
    assert_eq!(ld.spec.graph().line_endpoints()[5], (6, 4));
    assert_eq!(ld.spec.gens()[0].alpha, 0.08);
}

#[test]
fn per_unit_values_are_scaled_by_the_base() {
    let ld = parse_scenario(shipped()).unwrap();
    // Line 2 is 2 p.u. on a 0.5 ohm / 50 uH base.
    assert_eq!(ld.spec.lines()[1].resistance, 1.0);
    assert!((ld.spec.lines()[1].inductance - 1e-4).abs() < 1e-18);
    assert_eq!(ld.spec.buses()[6].conductance, 0.1);
}

#[test]
fn asymmetric_adjacency_is_rejected() {
    let mut v = shipped_json();
    let mut a = vec![vec![0.0; 6]; 6];
    for (i, j) in [(0, 1), (1, 2), (1, 4), (2, 3), (2, 4), (3, 5), (4, 5)] {
        a[i][j] = 2.0;
        a[j][i] = 2.0;
    }
    a[2][3] = 1.0;
    v["controller"] = json!({ "k_p": 2.0, "adjacency": a });
    let (field, message) = invalid(&v);
    assert_eq!(field, "controller.adjacency[2][3]");
    assert!(message.contains("a_34 = 1 but a_43 = 2"), "{message}");
    assert!(message.contains("symmetric"));
}

#[test]
fn conflicting_link_weights_are_rejected() {
    let mut v = shipped_json();
    v["controller"]["links"].as_array_mut().unwrap().push(json!({ "between": [2, 1], "weight": 3.0 }));
    let (_, message) = invalid(&v);
    assert!(message.contains("weights must be symmetric"), "{message}");
}

#[test]
fn negative_proportional_gain_is_rejected() {
    let mut v = shipped_json();
    v["controller"]["k_p"] = json!(-1.0);
    let (field, _) = invalid(&v);
    assert_eq!(field, "controller.k_p");
}

#[test]
fn disconnected_graph_with_secondary_is_rejected() {
    let mut v = shipped_json();
    // Without 4-6, unplugging DG4 is fine but DG6 only hangs on 5-6.
    v["controller"]["links"] = json!([
        { "between": [1, 2] }, { "between": [2, 3] }, { "between": [3, 4] }, { "between": [5, 6] }
    ]);
    let (field, message) = invalid(&v);
    assert_eq!(field, "events (t = 5 s)");
    assert!(message.contains("disconnected"), "{message}");
}

#[test]
fn unplug_that_splits_the_graph_is_rejected() {
    let mut v = shipped_json();
    v["controller"]["links"] = json!([
        { "between": [1, 2] }, { "between": [2, 3] }, { "between": [3, 4] }, { "between": [4, 5] }, { "between": [5, 6] }
    ]);
    let (field, _) = invalid(&v);
    assert_eq!(field, "events (t = 24 s)");
}

#[test]
fn disconnected_graph_is_fine_without_secondary() {
    let mut v = shipped_json();
    v["controller"]["links"] = json!([{ "between": [1, 2] }]);
    v["events"] = json!([{ "action": "cpl", "time": 1.0, "on": false }]);
    load(&v).unwrap();
}

#[test]
fn unknown_field_reports_its_path() {
    let mut v = shipped_json();
    v["generators"][2]["droopp"] = json!(0.3);
    let err = load(&v).unwrap_err();
    let ScenarioError::Syntax { message, .. } = &err else { panic!("{err:?}") };
    assert!(message.starts_with("generators[2]"), "{message}");
    assert!(message.contains("droopp"), "{message}");
}

#[test]
fn out_of_range_numbers_are_rejected() {
    let mut v = shipped_json();
    v["generators"][0]["bus"] = json!(9);
    assert_eq!(invalid(&v).0, "generators[0].bus");

    let mut v = shipped_json();
    v["lines"][0]["to"] = json!(0);
    assert_eq!(invalid(&v).0, "lines[0].to");

    let mut v = shipped_json();
    v["events"][4]["generator"] = json!(7);
    assert_eq!(invalid(&v).0, "events[4].generator");

    let mut v = shipped_json();
    v["events"][0]["time"] = json!(40.0);
    assert_eq!(invalid(&v).0, "events[0].time");
}

#[test]
fn two_generators_on_one_bus_are_rejected() {
    let mut v = shipped_json();
    v["generators"][1]["bus"] = json!(1);
    let (field, message) = invalid(&v);
    assert_eq!(field, "generators[1].bus");
    assert!(message.contains("generator 1"), "{message}");
}

#[test]
fn syntax_errors_carry_line_and_column() {
    let text = std::fs::read_to_string(shipped()).unwrap().replacen("\"v_nom\": 48.0", "\"v_nom\": 48.0,,", 1);
    match parse_scenario_str(&text, "broken.json") {
        Err(ScenarioError::Syntax { path, line, .. }) => {
            assert_eq!(path, "broken.json");
            assert!(line > 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(parse_scenario("/nonexistent/scenario.json"), Err(ScenarioError::Io { .. })));
}

fn numeric_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Number(_) => out.push(prefix.clone()),
        Value::Object(m) => {
            for (k, x) in m {
                prefix.push(k.clone());
                numeric_paths(x, prefix, out);
                prefix.pop();
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                prefix.push(i.to_string());
                numeric_paths(x, prefix, out);
                prefix.pop();
            }
        }
        _ => {}
    }
}

fn slot<'a>(v: &'a mut Value, path: &[String]) -> &'a mut Value {
    path.iter().fold(v, |v, k| match v {
        Value::Array(a) => &mut a[k.parse::<usize>().unwrap()],
        other => &mut other[k.as_str()],
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn truncated_or_corrupted_text_never_panics(cut in 0usize..4000, at in 0usize..4000, byte in 0u8..128) {
        let text = std::fs::read_to_string(shipped()).unwrap();
        let mut bytes = text.into_bytes();
        let n = bytes.len();
        bytes[at % n] = byte;
        bytes.truncate(n - cut % n);
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_scenario_str(&text, "fuzz.json");
    }

    #[test]
    fn hostile_numbers_never_panic(pick in any::<prop::sample::Index>(), value in prop_oneof![
        Just(json!(0)), Just(json!(-1)), Just(json!(1e308)), Just(json!(-1e308)), Just(json!(1e-320)),
        Just(json!(u64::MAX)), Just(json!(0.5)), Just(json!(1000))
    ]) {
        let mut v = shipped_json();
        let mut paths = Vec::new();
        numeric_paths(&v, &mut Vec::new(), &mut paths);
        *slot(&mut v, &paths[pick.index(paths.len())]) = value;
        let _ = load(&v);
    }
}
