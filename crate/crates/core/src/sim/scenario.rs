use alloc::vec::Vec;

use crate::control::ControllerConfig;
use crate::model::MicrogridSpec;

use super::SimError;

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    EnableSecondary,
    DisableSecondary,
    /// Switches the constant-power term on or off. `buses = None` means all buses.
    SetCplMask { buses: Option<Vec<usize>>, on: bool },
    /// Replaces the ZIP coefficients of one bus.
    SetZipValues { bus: usize, conductance: f64, current: f64, power: f64 },
    /// Opens the generator's breaker and drops its agent from the consensus.
    UnplugGen(usize),
    /// Closes the breaker once both sides are voltage-synchronized.
    ReplugGen(usize),
    /// Toggles the communication link between agents `i` and `j`.
    SetCommLink { i: usize, j: usize, on: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub time: f64,
    pub kind: EventKind,
}

/// Starting point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialCondition {
    /// Pure-droop steady state (u = 0) under the masks in force at the start.
    #[default]
    DroopEquilibrium,
    /// All fluxes and charges zero.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub t_start: f64,
    pub horizon: f64,
    /// Kept sorted by time; events with equal times keep their given order.
    pub events: Vec<ScenarioEvent>,
    pub initial: InitialCondition,
}

impl Scenario {
    pub fn new(horizon: f64, mut events: Vec<ScenarioEvent>) -> Result<Self, SimError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SimError::InvalidSettings("horizon must be finite and > 0"));
        }
        for (index, ev) in events.iter().enumerate() {
            if !(ev.time >= 0.0 && ev.time <= horizon) {
                return Err(SimError::InvalidEvent { index, time: ev.time, reason: "event time outside [0, horizon]" });
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Self { t_start: 0.0, horizon, events, initial: InitialCondition::default() })
    }

    pub fn with_initial(mut self, initial: InitialCondition) -> Self {
        self.initial = initial;
        self
    }

    /// A plain run with no events from `t_start` to `horizon`.
    pub fn quiet(t_start: f64, horizon: f64) -> Self {
        Self { t_start, horizon, events: Vec::new(), initial: InitialCondition::default() }
    }

    /// Index and plug-sequence checks against a concrete system.
    pub fn validate(&self, spec: &MicrogridSpec, cfg: &ControllerConfig) -> Result<(), SimError> {
        let ng = spec.n_gens();
        let mut plugged = alloc::vec![true; ng];
        let bad = |index: usize, time: f64, reason: &'static str| SimError::InvalidEvent { index, time, reason };
        for (index, ev) in self.events.iter().enumerate() {
            let t = ev.time;
            if t < self.t_start || t > self.horizon {
                return Err(bad(index, t, "event time outside the scenario window"));
            }
            match &ev.kind {
                EventKind::EnableSecondary | EventKind::DisableSecondary => {}
                EventKind::SetCplMask { buses, .. } => {
                    if let Some(b) = buses {
                        if b.iter().any(|&k| k >= spec.n_buses()) {
                            return Err(bad(index, t, "bus index out of range"));
                        }
                    }
                }
                EventKind::SetZipValues { bus, conductance, current, power } => {
                    if *bus >= spec.n_buses() {
                        return Err(bad(index, t, "bus index out of range"));
                    }
                    if !(conductance.is_finite() && current.is_finite() && power.is_finite()) {
                        return Err(bad(index, t, "ZIP values must be finite"));
                    }
                    if *conductance < 0.0 {
                        return Err(bad(index, t, "conductance must be >= 0"));
                    }
                }
                EventKind::UnplugGen(i) => {
                    if *i >= ng {
                        return Err(bad(index, t, "generator index out of range"));
                    }
                    if !plugged[*i] {
                        return Err(bad(index, t, "generator is already unplugged"));
                    }
                    plugged[*i] = false;
                }
                EventKind::ReplugGen(i) => {
                    if *i >= ng {
                        return Err(bad(index, t, "generator index out of range"));
                    }
                    if plugged[*i] {
                        return Err(bad(index, t, "replug without a prior unplug of the same generator"));
                    }
                    plugged[*i] = true;
                }
                EventKind::SetCommLink { i, j, .. } => {
                    if *i >= ng || *j >= ng {
                        return Err(bad(index, t, "agent index out of range"));
                    }
                    if cfg.comm.weight(*i, *j) == 0.0 {
                        return Err(bad(index, t, "no such communication link"));
                    }
                }
            }
        }
        Ok(())
    }
}
