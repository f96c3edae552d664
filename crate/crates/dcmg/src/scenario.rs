//! Scenario files: JSON text describing one microgrid, its controller, an
//! event timeline and run settings.
//!
//! Entities are numbered from 1 in the file (buses, generators, agents);
//! everything is converted to zero-based indices and SI units on load.
//! Connector and line impedances are given in per-unit on `base`.

use std::fs;
use std::path::Path;

use dcmg_core::{
    BusSpec, CommGraph, ControllerConfig, ElectricalGraph, EventKind, GeneratorSpec, InitialCondition, Integrator,
    IntegratorSettings, LineSpec, MicrogridSpec, ModelError, Scenario, ScenarioEvent, SimError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: line {line}, column {column}: {message}")]
    Syntax { path: String, line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Nominal voltage (V).
    pub v_nom: f64,
    pub base: PerUnitBase,
    pub buses: Vec<BusEntry>,
    pub generators: Vec<GeneratorEntry>,
    pub lines: Vec<LineEntry>,
    pub controller: ControllerEntry,
    #[serde(default)]
    pub events: Vec<EventEntry>,
    pub simulation: SimulationEntry,
    #[serde(default)]
    pub output: OutputEntry,
    #[serde(default)]
    pub verify: VerifyEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerUnitBase {
    /// Ohm.
    pub resistance: f64,
    /// Henry.
    pub inductance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusEntry {
    /// Farad.
    pub capacitance: f64,
    /// Constant-impedance part as a conductance (S). Exclusive with `load_resistance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conductance: Option<f64>,
    /// Constant-impedance part as a resistance (ohm), `1/G`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_resistance: Option<f64>,
    /// Constant current (A).
    #[serde(default)]
    pub current: f64,
    /// Constant power (W).
    #[serde(default)]
    pub power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorEntry {
    /// 1-based bus number.
    pub bus: usize,
    pub rated_current: f64,
    /// V/A.
    pub droop: f64,
    /// $/A^2.
    pub alpha: f64,
    /// $/A.
    pub beta: f64,
    /// $.
    #[serde(default)]
    pub gamma: f64,
    pub resistance_pu: f64,
    pub inductance_pu: f64,
    pub k_i: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineEntry {
    pub from: usize,
    pub to: usize,
    pub resistance_pu: f64,
    pub inductance_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerEntry {
    pub k_p: f64,
    /// Secondary layer on from the start.
    #[serde(default)]
    pub enabled: bool,
    /// Sample-and-hold period for neighbor data (s); absent means continuous.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_period: Option<f64>,
    /// Undirected links between 1-based agents. Exclusive with `adjacency`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<Vec<LinkEntry>>,
    /// Full weight matrix `a_ij`; must be symmetric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub between: [usize; 2],
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventEntry {
    EnableSecondary {
        time: f64,
    },
    DisableSecondary {
        time: f64,
    },
    /// Constant-power terms on or off; all buses when `buses` is absent.
    Cpl {
        time: f64,
        on: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        buses: Option<Vec<usize>>,
    },
    Zip {
        time: f64,
        bus: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        conductance: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        load_resistance: Option<f64>,
        #[serde(default)]
        current: f64,
        #[serde(default)]
        power: f64,
    },
    Unplug {
        time: f64,
        generator: usize,
    },
    Replug {
        time: f64,
        generator: usize,
    },
    CommLink {
        time: f64,
        between: [usize; 2],
        on: bool,
    },
}

impl EventEntry {
    pub fn time(&self) -> f64 {
        match *self {
            EventEntry::EnableSecondary { time }
            | EventEntry::DisableSecondary { time }
            | EventEntry::Cpl { time, .. }
            | EventEntry::Zip { time, .. }
            | EventEntry::Unplug { time, .. }
            | EventEntry::Replug { time, .. }
            | EventEntry::CommLink { time, .. } => time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorName {
    #[default]
    Rk4,
    Trapezoidal,
}

impl From<IntegratorName> for Integrator {
    fn from(n: IntegratorName) -> Self {
        match n {
            IntegratorName::Rk4 => Integrator::Rk4,
            IntegratorName::Trapezoidal => Integrator::Trapezoidal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialName {
    #[default]
    DroopEquilibrium,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationEntry {
    pub horizon: f64,
    #[serde(default)]
    pub t_start: f64,
    #[serde(default)]
    pub integrator: IntegratorName,
    /// Step (s); defaults per integrator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_interval: Option<f64>,
    #[serde(default)]
    pub initial: InitialName,
    /// Breaker-side voltage mismatch allowed at replug (V).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_time_constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputEntry {
    #[serde(default = "OutputEntry::default_trajectory")]
    pub trajectory: String,
    #[serde(default = "OutputEntry::default_events")]
    pub events: String,
    #[serde(default = "OutputEntry::default_summary")]
    pub summary: String,
}

impl OutputEntry {
    fn default_trajectory() -> String {
        "trajectory.csv".into()
    }
    fn default_events() -> String {
        "events.csv".into()
    }
    fn default_summary() -> String {
        "summary.txt".into()
    }
}

impl Default for OutputEntry {
    fn default() -> Self {
        Self {
            trajectory: Self::default_trajectory(),
            events: Self::default_events(),
            summary: Self::default_summary(),
        }
    }
}

/// Knobs for `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyEntry {
    pub seed: u64,
    /// Window after activation in which consensus must be reached (s).
    pub settle_time: f64,
    /// Extra time each steady segment is continued for the long-run average (s).
    pub extension: f64,
    /// Number of randomized large-perturbation runs without constant-power loads.
    pub perturbation_runs: usize,
    /// Largest perturbation energy as a multiple of the equilibrium energy.
    pub perturbation_energy: f64,
    /// Length of each perturbation run (s).
    pub perturbation_horizon: f64,
    /// Randomized cost sets for the dispatch brute-force check.
    pub dispatch_cases: usize,
}

impl Default for VerifyEntry {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            settle_time: 5.0,
            extension: 15.0,
            perturbation_runs: 50,
            perturbation_energy: 5.0,
            perturbation_horizon: 12.0,
            dispatch_cases: 40,
        }
    }
}

/// A parsed and validated scenario in SI, zero-based form.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub name: String,
    pub spec: MicrogridSpec,
    pub cfg: ControllerConfig,
    pub scenario: Scenario,
    pub settings: IntegratorSettings,
    pub output: OutputEntry,
    pub verify: VerifyEntry,
    pub file: ScenarioFile,
}

pub fn parse_scenario(path: impl AsRef<Path>) -> Result<LoadedScenario, ScenarioError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario_str(&text, &path.display().to_string())
}

/// `origin` only labels diagnostics.
pub fn parse_scenario_str(text: &str, origin: &str) -> Result<LoadedScenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        let message = if field.is_empty() || field == "." { inner.to_string() } else { format!("{field}: {inner}") };
        ScenarioError::Syntax { path: origin.to_string(), line: inner.line(), column: inner.column(), message }
    })?;
    file.load()
}

fn finite(field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(field, format!("must be finite, got {v}")))
    }
}

/// Converts a 1-based number to an index below `n`.
fn index(field: &str, what: &str, number: usize, n: usize) -> Result<usize, ScenarioError> {
    if number == 0 || number > n {
        Err(invalid(field, format!("{what} {number} does not exist (valid: 1..={n})")))
    } else {
        Ok(number - 1)
    }
}

fn conductance(field: &str, g: Option<f64>, r: Option<f64>) -> Result<f64, ScenarioError> {
    match (g, r) {
        (Some(_), Some(_)) => Err(invalid(field, "give either conductance or load_resistance, not both")),
        (Some(g), None) => finite(&format!("{field}.conductance"), g),
        (None, Some(r)) => {
            let r = finite(&format!("{field}.load_resistance"), r)?;
            if r <= 0.0 {
                Err(invalid(format!("{field}.load_resistance"), format!("must be > 0, got {r}")))
            } else {
                Ok(1.0 / r)
            }
        }
        (None, None) => Ok(0.0),
    }
}

fn model_error(e: ModelError) -> ScenarioError {
    match e {
        ModelError::InvalidParameter { kind, index, what, requirement, value } => {
            let list = match kind {
                "generator" => "generators",
                "line" => "lines",
                "bus" => "buses",
                _ => "v_nom",
            };
            let field = if list == "v_nom" { list.to_string() } else { format!("{list}[{index}]") };
            invalid(field, format!("{what} must be {requirement}, got {value}"))
        }
        ModelError::Graph(g) => invalid("lines", g.to_string()),
        other => invalid("model", other.to_string()),
    }
}

impl ScenarioFile {
    pub fn load(&self) -> Result<LoadedScenario, ScenarioError> {
        let spec = self.spec()?;
        let cfg = self.controller(spec.n_gens())?;
        let scenario = self.timeline(&spec)?;
        let settings = self.settings()?;
        scenario.validate(&spec, &cfg).map_err(|e| match e {
            SimError::InvalidEvent { index, reason, .. } => invalid(format!("events[{index}]"), reason),
            other => invalid("events", other.to_string()),
        })?;
        self.check_connectivity(&cfg, &scenario)?;
        self.check_verify()?;
        Ok(LoadedScenario {
            name: self.name.clone(),
            spec,
            cfg,
            scenario,
            settings,
            output: self.output.clone(),
            verify: self.verify,
            file: self.clone(),
        })
    }

    fn spec(&self) -> Result<MicrogridSpec, ScenarioError> {
        let base_r = finite("base.resistance", self.base.resistance)?;
        let base_l = finite("base.inductance", self.base.inductance)?;
        if base_r <= 0.0 || base_l <= 0.0 {
            return Err(invalid("base", "base resistance and inductance must be > 0"));
        }
        let nb = self.buses.len();
        if nb == 0 {
            return Err(invalid("buses", "at least one bus is required"));
        }
        if self.generators.is_empty() {
            return Err(invalid("generators", "at least one generator is required"));
        }
        let mut buses = Vec::with_capacity(nb);
        for (k, b) in self.buses.iter().enumerate() {
            let field = format!("buses[{k}]");
            buses.push(BusSpec {
                capacitance: finite(&format!("{field}.capacitance"), b.capacitance)?,
                conductance: conductance(&field, b.conductance, b.load_resistance)?,
                current: finite(&format!("{field}.current"), b.current)?,
                power: finite(&format!("{field}.power"), b.power)?,
            });
        }
        let mut gen_bus = Vec::with_capacity(self.generators.len());
        let mut gens = Vec::with_capacity(self.generators.len());
        for (i, g) in self.generators.iter().enumerate() {
            let field = format!("generators[{i}]");
            let bus = index(&format!("{field}.bus"), "bus", g.bus, nb)?;
            if let Some(other) = gen_bus.iter().position(|&b| b == bus) {
                return Err(invalid(
                    format!("{field}.bus"),
                    format!("bus {} already hosts generator {}", g.bus, other + 1),
                ));
            }
            gen_bus.push(bus);
            let f = |name: &str, v: f64| finite(&format!("{field}.{name}"), v);
            gens.push(GeneratorSpec {
                droop: f("droop", g.droop)?,
                resistance: f("resistance_pu", g.resistance_pu)? * base_r,
                inductance: f("inductance_pu", g.inductance_pu)? * base_l,
                alpha: f("alpha", g.alpha)?,
                beta: f("beta", g.beta)?,
                gamma: f("gamma", g.gamma)?,
                rated_current: f("rated_current", g.rated_current)?,
                k_i: f("k_i", g.k_i)?,
            });
        }
        let mut ends = Vec::with_capacity(self.lines.len());
        let mut lines = Vec::with_capacity(self.lines.len());
        for (j, l) in self.lines.iter().enumerate() {
            let field = format!("lines[{j}]");
            let from = index(&format!("{field}.from"), "bus", l.from, nb)?;
            let to = index(&format!("{field}.to"), "bus", l.to, nb)?;
            if from == to {
                return Err(invalid(field, format!("line connects bus {} to itself", l.from)));
            }
            ends.push((from, to));
            lines.push(LineSpec {
                resistance: finite(&format!("{field}.resistance_pu"), l.resistance_pu)? * base_r,
                inductance: finite(&format!("{field}.inductance_pu"), l.inductance_pu)? * base_l,
            });
        }
        let graph = ElectricalGraph::new(nb, ends, gen_bus).map_err(|e| invalid("lines", e.to_string()))?;
        MicrogridSpec::new(graph, gens, lines, buses, finite("v_nom", self.v_nom)?).map_err(model_error)
    }

    fn controller(&self, ng: usize) -> Result<ControllerConfig, ScenarioError> {
        let c = &self.controller;
        let comm = match (&c.links, &c.adjacency) {
            (Some(_), Some(_)) => return Err(invalid("controller", "give either links or adjacency, not both")),
            (None, None) => return Err(invalid("controller", "a communication graph (links or adjacency) is required")),
            (Some(links), None) => {
                let mut w = dcmg_core::nalgebra::DMatrix::zeros(ng, ng);
                for (k, l) in links.iter().enumerate() {
                    let field = format!("controller.links[{k}]");
                    let i = index(&format!("{field}.between[0]"), "agent", l.between[0], ng)?;
                    let j = index(&format!("{field}.between[1]"), "agent", l.between[1], ng)?;
                    if i == j {
                        return Err(invalid(field, "a link needs two distinct agents"));
                    }
                    let weight = finite(&format!("{field}.weight"), l.weight)?;
                    if weight <= 0.0 {
                        return Err(invalid(format!("{field}.weight"), format!("must be > 0, got {weight}")));
                    }
                    // A pair listed twice must agree in both directions.
                    if w[(i, j)] != 0.0 && w[(i, j)] != weight {
                        return Err(invalid(
                            field,
                            format!(
                                "a_{}{} = {} but a_{}{} = {}: weights must be symmetric",
                                l.between[0], l.between[1], weight, l.between[1], l.between[0], w[(i, j)]
                            ),
                        ));
                    }
                    w[(i, j)] = weight;
                    w[(j, i)] = weight;
                }
                CommGraph::from_weights(w).map_err(|e| invalid("controller.links", e.to_string()))?
            }
            (None, Some(rows)) => {
                if rows.len() != ng || rows.iter().any(|r| r.len() != ng) {
                    return Err(invalid("controller.adjacency", format!("must be {ng}x{ng} (one row per generator)")));
                }
                for i in 0..ng {
                    for j in 0..ng {
                        if rows[i][j] != rows[j][i] {
                            return Err(invalid(
                                format!("controller.adjacency[{i}][{j}]"),
                                format!(
                                    "a_{}{} = {} but a_{}{} = {}: weights must be symmetric",
                                    i + 1,
                                    j + 1,
                                    rows[i][j],
                                    j + 1,
                                    i + 1,
                                    rows[j][i]
                                ),
                            ));
                        }
                    }
                }
                let w = dcmg_core::nalgebra::DMatrix::from_fn(ng, ng, |i, j| rows[i][j]);
                CommGraph::from_weights(w).map_err(|e| invalid("controller.adjacency", e.to_string()))?
            }
        };
        let cfg = ControllerConfig::new(c.k_p, comm, c.enabled).map_err(|e| invalid("controller.k_p", e.to_string()))?;
        cfg.with_sample_period(c.sample_period).map_err(|e| invalid("controller.sample_period", e.to_string()))
    }

    fn timeline(&self, spec: &MicrogridSpec) -> Result<Scenario, ScenarioError> {
        let (nb, ng) = (spec.n_buses(), spec.n_gens());
        let sim = &self.simulation;
        finite("simulation.t_start", sim.t_start)?;
        finite("simulation.horizon", sim.horizon)?;
        if sim.t_start < 0.0 || sim.horizon <= sim.t_start {
            return Err(invalid("simulation.horizon", "need 0 <= t_start < horizon"));
        }
        let mut events = Vec::with_capacity(self.events.len());
        for (k, e) in self.events.iter().enumerate() {
            let field = format!("events[{k}]");
            let time = finite(&format!("{field}.time"), e.time())?;
            if time < sim.t_start || time > sim.horizon {
                return Err(invalid(format!("{field}.time"), format!("{time} s lies outside the simulated window")));
            }
            let kind = match e {
                EventEntry::EnableSecondary { .. } => EventKind::EnableSecondary,
                EventEntry::DisableSecondary { .. } => EventKind::DisableSecondary,
                EventEntry::Cpl { on, buses, .. } => {
                    let buses = match buses {
                        None => None,
                        Some(list) => Some(
                            list.iter()
                                .enumerate()
                                .map(|(n, &b)| index(&format!("{field}.buses[{n}]"), "bus", b, nb))
                                .collect::<Result<Vec<_>, _>>()?,
                        ),
                    };
                    EventKind::SetCplMask { buses, on: *on }
                }
                EventEntry::Zip { bus, conductance: g, load_resistance, current, power, .. } => EventKind::SetZipValues {
                    bus: index(&format!("{field}.bus"), "bus", *bus, nb)?,
                    conductance: conductance(&field, *g, *load_resistance)?,
                    current: finite(&format!("{field}.current"), *current)?,
                    power: finite(&format!("{field}.power"), *power)?,
                },
                EventEntry::Unplug { generator, .. } => {
                    EventKind::UnplugGen(index(&format!("{field}.generator"), "generator", *generator, ng)?)
                }
                EventEntry::Replug { generator, .. } => {
                    EventKind::ReplugGen(index(&format!("{field}.generator"), "generator", *generator, ng)?)
                }
                EventEntry::CommLink { between, on, .. } => {
                    let i = index(&format!("{field}.between[0]"), "agent", between[0], ng)?;
                    let j = index(&format!("{field}.between[1]"), "agent", between[1], ng)?;
                    if self.comm_weight(i, j) == 0.0 {
                        return Err(invalid(
                            field,
                            format!("agents {} and {} share no communication link", between[0], between[1]),
                        ));
                    }
                    EventKind::SetCommLink { i, j, on: *on }
                }
            };
            events.push(ScenarioEvent { time, kind });
        }
        let mut scenario = Scenario::new(sim.horizon, events).map_err(|e| invalid("events", e.to_string()))?;
        scenario.t_start = sim.t_start;
        Ok(scenario.with_initial(match sim.initial {
            InitialName::DroopEquilibrium => InitialCondition::DroopEquilibrium,
            InitialName::Zero => InitialCondition::Zero,
        }))
    }

    fn comm_weight(&self, i: usize, j: usize) -> f64 {
        if let Some(links) = &self.controller.links {
            for l in links {
                let (a, b) = (l.between[0].wrapping_sub(1), l.between[1].wrapping_sub(1));
                if (a, b) == (i, j) || (a, b) == (j, i) {
                    return l.weight;
                }
            }
            0.0
        } else if let Some(rows) = &self.controller.adjacency {
            rows.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }

    fn settings(&self) -> Result<IntegratorSettings, ScenarioError> {
        let sim = &self.simulation;
        let mut s = match sim.integrator {
            IntegratorName::Rk4 => IntegratorSettings::rk4(),
            IntegratorName::Trapezoidal => IntegratorSettings::trapezoidal(),
        };
        if let Some(h) = sim.dt {
            s = s.with_step(h);
        }
        if let Some(r) = sim.record_interval {
            s.record_interval = r;
        }
        if let Some(v) = sim.sync_tolerance {
            s.v_sync_tol = v;
        }
        if let Some(tau) = sim.sync_time_constant {
            s.sync_time_constant = tau;
        }
        if let Some(m) = sim.monitor {
            s.monitor = m;
        }
        s.validate().map_err(|e| invalid("simulation", e.to_string()))?;
        Ok(s)
    }

    /// The consensus equilibrium exists only on a connected communication
    /// graph; checked for every stretch of the timeline with the secondary on.
    fn check_connectivity(&self, cfg: &ControllerConfig, scenario: &Scenario) -> Result<(), ScenarioError> {
        let ng = cfg.comm.n_nodes();
        let links = cfg.comm.links();
        let mut active = vec![true; ng];
        let mut link_on = vec![true; links.len()];
        let mut secondary = cfg.enabled;
        let check = |active: &[bool], link_on: &[bool], secondary: bool, at: &str| {
            if !secondary {
                return Ok(());
            }
            let g = cfg.comm.masked(active, link_on);
            if g.is_connected_among(active) {
                Ok(())
            } else {
                Err(invalid(
                    at.to_string(),
                    "communication graph among plugged generators is disconnected while the secondary \
                     layer is enabled; the consensus equilibrium requires a connected graph",
                ))
            }
        };
        check(&active, &link_on, secondary, "controller")?;
        for (k, ev) in scenario.events.iter().enumerate() {
            match &ev.kind {
                EventKind::EnableSecondary => secondary = true,
                EventKind::DisableSecondary => secondary = false,
                EventKind::UnplugGen(i) => active[*i] = false,
                EventKind::ReplugGen(i) => active[*i] = true,
                EventKind::SetCommLink { i, j, on } => {
                    for (n, &(a, b, _)) in links.iter().enumerate() {
                        if (a, b) == (*i, *j) || (a, b) == (*j, *i) {
                            link_on[n] = *on;
                        }
                    }
                }
                _ => {}
            }
            // Several events may share a time stamp; judge the state after the last.
            let last_at_time = !matches!(scenario.events.get(k + 1), Some(next) if next.time == ev.time);
            if last_at_time {
                check(&active, &link_on, secondary, &format!("events (t = {} s)", ev.time))?;
            }
        }
        Ok(())
    }

    fn check_verify(&self) -> Result<(), ScenarioError> {
        let v = &self.verify;
        let positive = [
            ("verify.settle_time", v.settle_time),
            ("verify.extension", v.extension),
            ("verify.perturbation_energy", v.perturbation_energy),
            ("verify.perturbation_horizon", v.perturbation_horizon),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(field, format!("must be finite and > 0, got {value}")));
            }
        }
        Ok(())
    }
}
