#![allow(dead_code)]

use dcmg_core::*;

pub const V_NOM: f64 = 48.0;
const R_BASE: f64 = 0.5;
const L_BASE: f64 = 50e-6;

pub fn table1_gens() -> Vec<GeneratorSpec> {
    let alpha = [0.8, 1.9, 1.0, 1.4, 1.2, 1.6];
    let beta = [1.0, 2.5, 1.2, 1.8, 1.5, 2.1];
    let gamma = [2.0, 5.0, 2.0, 4.0, 3.0, 4.0];
    let droop = [0.2, 0.5, 0.25, 0.25, 0.3, 0.375];
    let rated = [15.0, 6.0, 12.0, 12.0, 10.0, 8.0];
    let rl = [0.5, 0.4, 0.55, 0.6, 0.45, 0.5];
    (0..6)
        .map(|i| GeneratorSpec {
            droop: droop[i],
            resistance: rl[i] * R_BASE,
            inductance: rl[i] * L_BASE,
            alpha: alpha[i] * 0.1,
            beta: beta[i] * 0.1,
            gamma: gamma[i] * 0.1,
            rated_current: rated[i],
            k_i: 100.0,
        })
        .collect()
}

pub fn fig4_spec() -> MicrogridSpec {
    let lines = vec![(0, 1), (1, 6), (6, 2), (2, 3), (3, 7), (6, 4), (7, 5), (4, 5)];
    let graph = ElectricalGraph::new(8, lines, (0..6).collect()).unwrap();
    let line_pu = [1.0, 2.0, 2.0, 1.0, 1.0, 3.0, 1.0, 2.0];
    let lines = line_pu.iter().map(|p| LineSpec { resistance: p * R_BASE, inductance: p * L_BASE }).collect();
    let inv_g = [30.0, 20.0, 20.0, 20.0, 30.0, 20.0, 10.0, 10.0];
    let i_cte = [0.5, 0.6, 0.4, 0.5, 0.45, 0.5, 0.45, 0.4];
    let buses = (0..8)
        .map(|k| {
            let g = 1.0 / inv_g[k];
            BusSpec { capacitance: 22e-3, conductance: g, current: i_cte[k], power: 0.8 * g * V_NOM * V_NOM }
        })
        .collect();
    MicrogridSpec::new(graph, table1_gens(), lines, buses, V_NOM).unwrap()
}

pub fn fig4_comm(weight: f64) -> CommGraph {
    let links = [(0, 1), (1, 2), (1, 4), (2, 3), (2, 4), (3, 5), (4, 5)];
    let links: Vec<_> = links.iter().map(|&(i, j)| (i, j, weight)).collect();
    CommGraph::from_links(6, &links).unwrap()
}

pub fn fig4_cfg() -> ControllerConfig {
    ControllerConfig::new(2.0, fig4_comm(2.0), false).unwrap()
}

pub fn timeline() -> Scenario {
    let ev = |time, kind| ScenarioEvent { time, kind };
    Scenario::new(
        34.0,
        vec![
            ev(0.0, EventKind::SetCplMask { buses: None, on: false }),
            ev(5.0, EventKind::EnableSecondary),
            ev(14.0, EventKind::SetCplMask { buses: None, on: true }),
            ev(19.0, EventKind::SetCplMask { buses: None, on: false }),
            ev(24.0, EventKind::UnplugGen(3)),
            ev(29.0, EventKind::ReplugGen(3)),
        ],
    )
    .unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
