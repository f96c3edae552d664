//! Event-driven time integration of the coupled plant and controller.
//!
//! The integrated state is `[phi_G; phi_E; q_N; x_c]`. Steps are split at
//! every event, recording instant and (with sample-and-hold exchange) every
//! communication instant, so events land exactly on their timestamps.

mod engine;
pub mod monitor;
pub mod scenario;
pub mod trajectory;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::control::{controller_rhs, ConsensusNetwork, ControlError, ControllerConfig, ControllerState};
use crate::dispatch::DispatchError;
use crate::model::{LoadMask, MicrogridSpec, ModelError, PhysicalState};

pub use monitor::{monitor_lyapunov, LyapunovMonitor, LyapunovSample, LyapunovStats};
pub use scenario::{EventKind, InitialCondition, Scenario, ScenarioEvent};
pub use trajectory::{EventRecord, EventStatus, MeanState, RunStats, Sample, Segment, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid integrator settings: {0}")]
    InvalidSettings(&'static str),
    #[error("event #{index} at t = {time} s: {reason}")]
    InvalidEvent { index: usize, time: f64, reason: &'static str },
    #[error("constant-power load singularity at t = {t} s on bus {bus} (V = {voltage} V)")]
    CplSingularity { t: f64, bus: usize, voltage: f64 },
    #[error("state diverged at t = {t} s")]
    Diverged { t: f64, last: Option<Box<Sample>> },
    #[error("implicit step failed at t = {t} s with h = {h} s")]
    ImplicitFailure { t: f64, h: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    /// Classical fourth-order Runge-Kutta, fixed step.
    #[default]
    Rk4,
    /// Implicit trapezoidal rule with a chord-Newton inner solve.
    Trapezoidal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSettings {
    pub integrator: Integrator,
    /// Nominal step (s).
    pub h: f64,
    /// Smallest step the implicit method may halve down to.
    pub h_min: f64,
    /// Recording period (s).
    pub record_interval: f64,
    /// Largest breaker-side voltage mismatch allowed at replug (V).
    pub v_sync_tol: f64,
    /// Time constant of the synchronizer that pulls an unplugged generator's
    /// terminal voltage toward its bus (s).
    pub sync_time_constant: f64,
    /// Run the oracle and Lyapunov monitor on every fixed-mask segment.
    pub monitor: bool,
    /// Any state entry beyond this magnitude counts as divergence.
    pub divergence_limit: f64,
}

impl IntegratorSettings {
    pub fn rk4() -> Self {
        Self {
            integrator: Integrator::Rk4,
            h: 1e-5,
            h_min: 1e-5,
            record_interval: 1e-3,
            v_sync_tol: 0.1,
            sync_time_constant: 0.05,
            monitor: true,
            divergence_limit: 1e9,
        }
    }

    pub fn trapezoidal() -> Self {
        Self { integrator: Integrator::Trapezoidal, h: 1e-4, h_min: 1e-9, ..Self::rk4() }
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.h = h;
        self.h_min = self.h_min.min(h);
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.h) {
            return Err(SimError::InvalidSettings("step h must be finite and > 0"));
        }
        if !pos(self.h_min) || self.h_min > self.h {
            return Err(SimError::InvalidSettings("h_min must be in (0, h]"));
        }
        if !pos(self.record_interval) {
            return Err(SimError::InvalidSettings("record interval must be finite and > 0"));
        }
        if !pos(self.v_sync_tol) {
            return Err(SimError::InvalidSettings("sync tolerance must be finite and > 0"));
        }
        if !pos(self.sync_time_constant) {
            return Err(SimError::InvalidSettings("sync time constant must be finite and > 0"));
        }
        if !pos(self.divergence_limit) {
            return Err(SimError::InvalidSettings("divergence limit must be finite and > 0"));
        }
        Ok(())
    }
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self::rk4()
    }
}

/// Full simulator state with the masks in force.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub phys: PhysicalState,
    /// `ctrl.active` doubles as the breaker state of each generator.
    pub ctrl: ControllerState,
    pub loads: LoadMask,
    /// Indexed like [`crate::graph::CommGraph::links`]. A link only carries
    /// data when both endpoints are plugged in as well.
    pub link_on: Vec<bool>,
    pub secondary_enabled: bool,
    /// Terminal voltage of each unplugged generator; unused while plugged.
    pub v_sync: Vec<f64>,
    /// Generators waiting for synchronization before their breaker closes.
    pub pending_replug: Vec<usize>,
}

impl SystemState {
    /// Zero state, everything plugged in and on; the secondary layer starts as
    /// `cfg.enabled` says.
    pub fn new(spec: &MicrogridSpec, cfg: &ControllerConfig) -> Self {
        Self {
            t: 0.0,
            phys: PhysicalState::zeros(spec),
            ctrl: ControllerState::new(spec.n_gens()),
            loads: LoadMask::all_on(spec.n_buses()),
            link_on: vec![true; cfg.comm.links().len()],
            secondary_enabled: cfg.enabled,
            v_sync: vec![spec.v_nom(); spec.n_gens()],
            pending_replug: Vec::new(),
        }
    }

    pub fn gen_active(&self) -> &[bool] {
        &self.ctrl.active
    }

    /// Links that actually carry data: switched on with both ends plugged.
    pub fn effective_links(&self, cfg: &ControllerConfig) -> Vec<bool> {
        cfg.comm
            .links()
            .iter()
            .zip(&self.link_on)
            .map(|(&(i, j, _), &on)| on && self.ctrl.active[i] && self.ctrl.active[j])
            .collect()
    }

    pub fn network(&self, cfg: &ControllerConfig) -> ConsensusNetwork {
        ConsensusNetwork::new(&cfg.comm, &self.ctrl.active, &self.link_on)
    }

    /// Terminal voltages and droop corrections under continuous exchange.
    pub fn terminal_voltages(&self, spec: &MicrogridSpec, cfg: &ControllerConfig) -> (Vec<f64>, Vec<f64>) {
        let currents: Vec<f64> = self
            .phys
            .gen_currents(spec)
            .into_iter()
            .zip(&self.ctrl.active)
            .map(|(i, &on)| if on { i } else { 0.0 })
            .collect();
        let u = if self.secondary_enabled {
            let live = ControllerConfig { enabled: true, ..cfg.clone() };
            controller_rhs(&live, spec.gens(), &self.network(cfg), &self.ctrl.x_c, &currents).0
        } else {
            vec![0.0; spec.n_gens()]
        };
        let v = (0..spec.n_gens())
            .map(|i| {
                if self.ctrl.active[i] {
                    spec.v_nom() - spec.gens()[i].droop * currents[i] + u[i]
                } else {
                    self.v_sync[i]
                }
            })
            .collect();
        (v, u)
    }
}

/// Applies one event to `state` (and `spec` for ZIP edits).
///
/// A replug whose breaker sides differ by more than `v_sync_tol` is not
/// applied; the caller retries it later.
pub fn apply_event(
    spec: &mut MicrogridSpec,
    cfg: &ControllerConfig,
    state: &mut SystemState,
    kind: &EventKind,
    v_sync_tol: f64,
) -> Result<EventStatus, SimError> {
    let bad = |reason| SimError::InvalidEvent { index: 0, time: state.t, reason };
    match kind {
        EventKind::EnableSecondary => state.secondary_enabled = true,
        EventKind::DisableSecondary => state.secondary_enabled = false,
        EventKind::SetCplMask { buses, on } => match buses {
            None => (0..spec.n_buses()).for_each(|k| state.loads.set_cpl(k, *on)),
            Some(list) => {
                if list.iter().any(|&k| k >= spec.n_buses()) {
                    return Err(bad("bus index out of range"));
                }
                list.iter().for_each(|&k| state.loads.set_cpl(k, *on));
            }
        },
        EventKind::SetZipValues { bus, conductance, current, power } => {
            spec.set_bus_load(*bus, *conductance, *current, *power)?;
        }
        EventKind::UnplugGen(i) => {
            let i = *i;
            if i >= spec.n_gens() || !state.ctrl.active[i] {
                return Err(bad("unplug of a generator that is not plugged in"));
            }
            let (v, _) = state.terminal_voltages(spec, cfg);
            state.v_sync[i] = v[i];
            state.phys.phi_g[i] = 0.0;
            state.ctrl.active[i] = false;
        }
        EventKind::ReplugGen(i) => {
            let i = *i;
            if i >= spec.n_gens() || state.ctrl.active[i] {
                return Err(bad("replug without a prior unplug of the same generator"));
            }
            let bus = spec.graph().gen_bus()[i];
            let v_bus = state.phys.q_n[bus] / spec.buses()[bus].capacitance;
            let mismatch = (state.v_sync[i] - v_bus).abs();
            if !(mismatch < v_sync_tol) {
                return Ok(EventStatus::Deferred { mismatch });
            }
            state.phys.phi_g[i] = 0.0;
            state.ctrl.active[i] = true;
        }
        EventKind::SetCommLink { i, j, on } => {
            let (a, b) = if i < j { (*i, *j) } else { (*j, *i) };
            let idx = cfg
                .comm
                .links()
                .iter()
                .position(|&(p, q, _)| p == a && q == b)
                .ok_or(bad("no such communication link"))?;
            state.link_on[idx] = *on;
        }
    }
    Ok(EventStatus::Applied)
}

/// A configured simulator. Runs are independent and deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    spec: MicrogridSpec,
    cfg: ControllerConfig,
    /// `cfg` with the agents switched on; the run-time state flag gates them.
    live_cfg: ControllerConfig,
    settings: IntegratorSettings,
}

impl Simulation {
    pub fn new(spec: MicrogridSpec, cfg: ControllerConfig, settings: IntegratorSettings) -> Result<Self, SimError> {
        cfg.check_generators(spec.n_gens())?;
        settings.validate()?;
        let live_cfg = ControllerConfig { enabled: true, ..cfg.clone() };
        Ok(Self { spec, cfg, live_cfg, settings })
    }

    pub fn spec(&self) -> &MicrogridSpec {
        &self.spec
    }

    pub fn cfg(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub(crate) fn live_cfg(&self) -> &ControllerConfig {
        &self.live_cfg
    }

    pub fn settings(&self) -> &IntegratorSettings {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut IntegratorSettings {
        &mut self.settings
    }

    /// State at `scenario.t_start` before its events are applied. Under
    /// [`InitialCondition::DroopEquilibrium`] the physical part is the droop
    /// steady state for the masks those events will produce.
    pub fn initial_state(&self, scenario: &Scenario) -> Result<SystemState, SimError> {
        let mut state = SystemState::new(&self.spec, &self.cfg);
        state.t = scenario.t_start;
        if scenario.initial == InitialCondition::Zero {
            return Ok(state);
        }
        let mut spec = self.spec.clone();
        let mut probe = state.clone();
        for ev in scenario.events.iter().take_while(|e| e.time <= scenario.t_start) {
            apply_event(&mut spec, &self.cfg, &mut probe, &ev.kind, f64::INFINITY)?;
        }
        let zeros = vec![0.0; spec.n_gens()];
        let eq = crate::dispatch::solve_droop_equilibrium(&spec, &probe.loads, probe.gen_active(), &zeros)?;
        state.phys = eq.physical_state(&spec);
        for i in 0..spec.n_gens() {
            if !probe.ctrl.active[i] {
                state.v_sync[i] = eq.v_gen[i];
            }
        }
        Ok(state)
    }

    pub fn run(&self, scenario: &Scenario) -> Result<Trajectory, SimError> {
        let init = self.initial_state(scenario)?;
        self.run_from(scenario, init)
    }

    /// Integrates from `init` (whose time must be `scenario.t_start`).
    pub fn run_from(&self, scenario: &Scenario, init: SystemState) -> Result<Trajectory, SimError> {
        scenario.validate(&self.spec, &self.cfg)?;
        engine::Runner::new(self, init)?.run(scenario)
    }

    /// Continues `state` for `duration` seconds with its masks frozen.
    pub fn continue_from(&self, state: SystemState, duration: f64) -> Result<Trajectory, SimError> {
        let scenario = Scenario::quiet(state.t, state.t + duration);
        self.run_from(&scenario, state)
    }
}
