mod common;

use dcmg::{parse_scenario, run_batch, BatchJob};
use dcmg_core::{EventKind, IntegratorSettings, Scenario, ScenarioEvent, Simulation};

fn activation(horizon: f64) -> Scenario {
    let ev = |time, kind| ScenarioEvent { time, kind };
    Scenario::new(
        horizon,
        vec![ev(0.0, EventKind::SetCplMask { buses: None, on: false }), ev(0.01, EventKind::EnableSecondary)],
    )
    .unwrap()
}

#[test]
fn batch_results_match_sequential_runs_in_order() {
    let ld = parse_scenario(common::shipped()).unwrap();
    let settings = IntegratorSettings { monitor: false, ..IntegratorSettings::trapezoidal() };
    let jobs: Vec<BatchJob> = [0.02, 0.05, 0.03, 0.04]
        .iter()
        .map(|&horizon| {
            let sim = Simulation::new(ld.spec.clone(), ld.cfg.clone(), settings).unwrap();
            BatchJob { sim, scenario: activation(horizon), init: None }
        })
        .collect();
    let parallel = run_batch(&jobs);
    for (job, got) in jobs.iter().zip(parallel) {
        let want = job.run().unwrap();
        // Monitor columns are NaN with the monitor off; compare the text form.
        assert_eq!(format!("{:?}", got.unwrap().samples), format!("{:?}", want.samples));
    }
}

#[test]
fn continuation_starts_from_the_given_state() {
    let ld = parse_scenario(common::shipped()).unwrap();
    let settings = IntegratorSettings { monitor: false, ..IntegratorSettings::trapezoidal() };
    let sim = Simulation::new(ld.spec.clone(), ld.cfg.clone(), settings).unwrap();
    let first = sim.run(&activation(0.1)).unwrap();
    let job = BatchJob::continuation(sim, first.final_state.clone(), 0.05);
    let next = run_batch(std::slice::from_ref(&job)).remove(0).unwrap();
    assert_eq!(next.samples[0].t, first.final_state.t);
    assert_eq!(next.samples[0].v_n, first.final_state.phys.bus_voltages(&ld.spec));
}
