mod common;

use common::*;
use dcmg_core::model::assemble_ph_with_loads;
use dcmg_core::sim::EventStatus;
use dcmg_core::*;
use nalgebra::{DMatrix, DVector};

fn ev(time: f64, kind: EventKind) -> ScenarioEvent {
    ScenarioEvent { time, kind }
}

fn activation(horizon: f64, at: f64) -> Scenario {
    Scenario::new(
        horizon,
        vec![ev(0.0, EventKind::SetCplMask { buses: None, on: false }), ev(at, EventKind::EnableSecondary)],
    )
    .unwrap()
}

fn quiet_settings(base: IntegratorSettings) -> IntegratorSettings {
    IntegratorSettings { monitor: false, ..base }
}

fn final_vector(traj: &Trajectory) -> Vec<f64> {
    let s = &traj.final_state;
    s.phys.to_vector().iter().copied().chain(s.ctrl.x_c.iter().copied()).collect()
}

#[test]
fn no_load_equilibrium_is_preserved() {
    let mut spec = fig4_spec();
    for k in 0..spec.n_buses() {
        spec.set_bus_load(k, 0.0, 0.0, 0.0).unwrap();
    }
    let sim = Simulation::new(spec, fig4_cfg(), IntegratorSettings::rk4()).unwrap();
    let traj = sim.run(&Scenario::new(1.0, vec![]).unwrap()).unwrap();
    let worst = traj
        .samples
        .iter()
        .flat_map(|s| s.v_n.iter().chain(&s.v_gen))
        .fold(0.0_f64, |m, v| m.max((v - V_NOM).abs()));
    assert!(worst < 1e-9, "max |V - V_nom| = {worst:e}");
}

/// Closed loop without constant-power loads is affine: `z' = A z + c`.
/// Built from the matrix form and the interconnection matrices only.
fn affine_closed_loop(spec: &MicrogridSpec, cfg: &ControllerConfig) -> (DMatrix<f64>, DVector<f64>) {
    let ph = assemble_ph_with_loads(spec, &LoadMask::without_cpl(spec.n_buses()));
    let m = cbi_matrices(spec.gens(), cfg);
    let (n, ng) = (ph.q.len(), spec.n_gens());
    let q = DMatrix::from_diagonal(&ph.q);
    let l = cfg.comm.laplacian();
    let two_alpha = m.w_inv();
    let k_i = DMatrix::from_diagonal(&DVector::from_iterator(ng, spec.gens().iter().map(|g| g.k_i)));
    let out = ph.g.transpose() * &q;

    let mut a = DMatrix::zeros(n + ng, n + ng);
    // u = -r y + 2 alpha L x_c + b
    let plant = &ph.f * &q - &ph.g * &m.r * &out;
    a.view_mut((0, 0), (n, n)).copy_from(&plant);
    a.view_mut((0, n), (n, ng)).copy_from(&(&ph.g * &two_alpha * &l));
    // x_c' = -K_I L (2 alpha y + beta)
    a.view_mut((n, 0), (ng, n)).copy_from(&(-(&k_i * &l * &two_alpha * &out)));

    let mut c = DVector::zeros(n + ng);
    c.rows_mut(0, n).copy_from(&(&ph.e + &ph.g * &m.b));
    c.rows_mut(n, ng).copy_from(&(-(&k_i * &l * &m.b_c)));
    (a, c)
}

#[test]
fn trapezoidal_matches_matrix_exponential() {
    let spec = fig4_spec();
    let cfg = fig4_cfg();
    let sim = Simulation::new(spec.clone(), cfg.clone(), quiet_settings(IntegratorSettings::trapezoidal())).unwrap();
    let scenario = activation(1.0, 0.0);
    let init = sim.initial_state(&scenario).unwrap();
    let traj = sim.run_from(&scenario, init.clone()).unwrap();

    let (a, c) = affine_closed_loop(&spec, &cfg);
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&a);
    aug.view_mut((0, n), (n, 1)).copy_from(&c);
    let z0: Vec<f64> = init.phys.to_vector().iter().copied().chain(init.ctrl.x_c.iter().copied()).chain([1.0]).collect();
    let z1 = (aug * 1.0).exp() * DVector::from_vec(z0);

    // Compare in electrical units.
    let exact = PhysicalState::from_vector(&spec, &z1.rows(0, spec.n_states()).into_owned());
    let got = &traj.final_state.phys;
    let dv = rel_err(&got.bus_voltages(&spec), &exact.bus_voltages(&spec));
    let di = rel_err(&got.gen_currents(&spec), &exact.gen_currents(&spec));
    let de = rel_err(&got.line_currents(&spec), &exact.line_currents(&spec));
    let dx = rel_err(&traj.final_state.ctrl.x_c, &z1.as_slice()[spec.n_states()..n]);
    assert!(dv < 1e-6 && di < 1e-6 && de < 1e-6 && dx < 1e-6, "{dv:e} {di:e} {de:e} {dx:e}");
}

#[test]
fn rk4_converges_at_fourth_order() {
    let run = |h: f64| {
        let settings = IntegratorSettings { record_interval: 1e-2, ..quiet_settings(IntegratorSettings::rk4().with_step(h)) };
        let sim = Simulation::new(fig4_spec(), fig4_cfg(), settings).unwrap();
        final_vector(&sim.run(&activation(0.01, 0.0)).unwrap())
    };
    // Coarse enough to leave round-off behind, inside the stability region.
    let reference = run(2.5e-6);
    let err = |v: &[f64]| rel_err(v, &reference);
    let e1 = err(&run(2e-5));
    let e2 = err(&run(1e-5));
    let ratio = e1 / e2;
    assert!((ratio - 16.0).abs() <= 0.2 * 16.0, "ratio {ratio} ({e1:e} / {e2:e})");
}

#[test]
fn trapezoidal_stays_bounded_where_rk4_diverges() {
    let h = 2e-4;
    let scenario = activation(0.5, 0.0);
    let rk4 = Simulation::new(fig4_spec(), fig4_cfg(), quiet_settings(IntegratorSettings::rk4().with_step(h))).unwrap();
    assert!(matches!(rk4.run(&scenario), Err(SimError::Diverged { .. })));
    let trap =
        Simulation::new(fig4_spec(), fig4_cfg(), quiet_settings(IntegratorSettings::trapezoidal().with_step(h))).unwrap();
    let traj = trap.run(&scenario).unwrap();
    assert!(traj.samples.iter().all(|s| s.v_n.iter().all(|v| v.abs() < 100.0)));
}

#[test]
fn integrators_agree_on_a_smooth_segment() {
    let scenario = activation(1.0, 0.2);
    let a = Simulation::new(fig4_spec(), fig4_cfg(), quiet_settings(IntegratorSettings::rk4())).unwrap().run(&scenario).unwrap();
    let b = Simulation::new(fig4_spec(), fig4_cfg(), quiet_settings(IntegratorSettings::trapezoidal()))
        .unwrap()
        .run(&scenario)
        .unwrap();
    let (sa, sb) = (a.last().unwrap(), b.last().unwrap());
    assert!(rel_err(&sb.v_n, &sa.v_n) < 1e-5);
    assert!(rel_err(&sb.i_g, &sa.i_g) < 1e-5);
}

#[test]
fn runs_are_bit_identical() {
    let sim = Simulation::new(fig4_spec(), fig4_cfg(), IntegratorSettings::rk4()).unwrap();
    let scenario = activation(0.3, 0.1);
    let bits = |t: &Trajectory| -> Vec<u64> {
        t.samples
            .iter()
            .flat_map(|s| {
                [s.t, s.wavg_v, s.h, s.h_t, s.dh_t].into_iter().chain(s.v_gen.iter().copied()).chain(s.x_c.iter().copied())
            })
            .map(f64::to_bits)
            .collect()
    };
    let a = sim.run(&scenario).unwrap();
    let b = sim.run(&scenario).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(final_vector(&a), final_vector(&b));
}

#[test]
fn activation_lands_exactly_on_its_timestamp() {
    let sim = Simulation::new(fig4_spec(), fig4_cfg(), IntegratorSettings::rk4()).unwrap();
    let traj = sim.run(&activation(0.1, 0.05)).unwrap();
    let before = traj.samples.iter().find(|s| (s.t - 0.049).abs() < 1e-12).unwrap();
    let at = traj.samples.iter().find(|s| s.t == 0.05).unwrap();
    assert!(before.u.iter().all(|&u| u == 0.0));
    assert!(at.u.iter().any(|&u| u != 0.0));
    // The physical state is continuous across the event.
    let seg = &traj.segments[0];
    assert_eq!(seg.t_end, 0.05);
    let end_currents = seg.end_state.phys.gen_currents(sim.spec());
    assert_eq!(end_currents, at.i_g);
    assert!(traj.stats.max_droop_identity_error < 1e-12);
}

#[test]
fn unplug_freezes_current_and_drops_links() {
    let spec = fig4_spec();
    let cfg = fig4_cfg();
    let mut state = SystemState::new(&spec, &cfg);
    state.phys = PhysicalState::from_electrical(&spec, &[3.0; 6], &[0.5; 8], &[47.0; 8]);
    let mut s = spec.clone();
    apply_event(&mut s, &cfg, &mut state, &EventKind::UnplugGen(3), 0.1).unwrap();
    assert_eq!(state.phys.phi_g[3], 0.0);
    assert!(!state.ctrl.active[3]);
    let links = cfg.comm.links();
    let live = state.effective_links(&cfg);
    for (k, &(i, j, _)) in links.iter().enumerate() {
        let touches = i == 3 || j == 3;
        assert_eq!(live[k], !touches, "link ({i}, {j})");
    }
    assert!(matches!(
        apply_event(&mut s, &cfg, &mut state, &EventKind::UnplugGen(3), 0.1),
        Err(SimError::InvalidEvent { .. })
    ));
}

#[test]
fn replug_without_unplug_is_rejected() {
    let scenario = Scenario::new(1.0, vec![ev(0.5, EventKind::ReplugGen(2))]).unwrap();
    let sim = Simulation::new(fig4_spec(), fig4_cfg(), IntegratorSettings::rk4()).unwrap();
    assert!(matches!(sim.run(&scenario), Err(SimError::InvalidEvent { index: 0, .. })));
}

#[test]
fn unsynchronized_replug_is_deferred() {
    let settings = IntegratorSettings { sync_time_constant: 0.01, ..quiet_settings(IntegratorSettings::trapezoidal()) };
    let sim = Simulation::new(fig4_spec(), fig4_cfg(), settings).unwrap();
    let scenario = Scenario::new(
        0.3,
        vec![
            ev(0.0, EventKind::SetCplMask { buses: None, on: false }),
            ev(0.0, EventKind::EnableSecondary),
            ev(0.1, EventKind::UnplugGen(0)),
            ev(0.1, EventKind::ReplugGen(0)),
        ],
    )
    .unwrap();
    let traj = sim.run(&scenario).unwrap();
    let replugs: Vec<_> = traj.events.iter().filter(|e| e.kind == EventKind::ReplugGen(0)).collect();
    assert!(matches!(replugs[0].status, EventStatus::Deferred { .. }));
    let done = replugs.last().unwrap();
    assert_eq!(done.status, EventStatus::Applied);
    assert!(done.t > 0.1 && done.scheduled == 0.1);
    assert!(traj.final_state.ctrl.active[0]);
}

#[test]
fn cpl_singularity_reports_time_and_bus() {
    let sim = Simulation::new(fig4_spec(), fig4_cfg(), IntegratorSettings::rk4()).unwrap();
    let scenario = Scenario::new(0.1, vec![]).unwrap().with_initial(InitialCondition::Zero);
    match sim.run(&scenario) {
        Err(SimError::CplSingularity { t, bus, voltage }) => {
            assert_eq!(t, 0.0);
            assert_eq!(bus, 0);
            assert_eq!(voltage, 0.0);
        }
        other => panic!("expected a singularity, got {other:?}"),
    }
}

#[test]
fn steady_state_balances_load_and_keeps_weighted_average() {
    let spec = fig4_spec();
    let sim = Simulation::new(spec.clone(), fig4_cfg(), IntegratorSettings::trapezoidal()).unwrap();
    let traj = sim.run(&activation(10.0, 0.0)).unwrap();
    let last = traj.last().unwrap();
    let supplied: f64 = last.i_g.iter().sum();
    let drawn: f64 = spec.buses().iter().zip(&last.v_n).map(|(b, v)| b.conductance * v + b.current).sum();
    assert!((supplied - drawn).abs() < 1e-6, "{supplied} vs {drawn}");
    for s in &traj.samples {
        let w: f64 = spec.gens().iter().zip(&s.v_gen).map(|(g, v)| (v - V_NOM) / (2.0 * g.alpha)).sum();
        assert!(w.abs() < 1e-9, "t = {}: {w:e}", s.t);
    }
}

#[test]
fn sample_and_hold_exchange_still_reaches_consensus() {
    let cfg = fig4_cfg().with_sample_period(Some(1e-3)).unwrap();
    let sim = Simulation::new(fig4_spec(), cfg, IntegratorSettings::trapezoidal()).unwrap();
    let traj = sim.run(&activation(8.0, 0.0)).unwrap();
    assert!(traj.last().unwrap().lambda_spread < 1e-4);
    // No Lyapunov monitor without continuous exchange, but the oracle still runs.
    assert!(traj.segments.iter().all(|s| s.lyapunov.is_none() && s.equilibrium.is_some()));
}

#[test]
fn invalid_settings_are_rejected() {
    let bad = IntegratorSettings { h: -1.0, ..IntegratorSettings::rk4() };
    assert!(matches!(Simulation::new(fig4_spec(), fig4_cfg(), bad), Err(SimError::InvalidSettings(_))));
    let cfg = ControllerConfig::new(2.0, CommGraph::from_links(3, &[(0, 1, 1.0)]).unwrap(), false).unwrap();
    assert!(matches!(Simulation::new(fig4_spec(), cfg, IntegratorSettings::rk4()), Err(SimError::Control(_))));
}
