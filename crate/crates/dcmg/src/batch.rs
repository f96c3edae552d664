//! Parallel execution of independent runs. Each run stays single-threaded and
//! deterministic, so results do not depend on the thread count.

use dcmg_core::{Scenario, SimError, Simulation, SystemState, Trajectory};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct BatchJob {
    pub sim: Simulation,
    pub scenario: Scenario,
    /// Start state; `None` uses the scenario's initial condition.
    pub init: Option<SystemState>,
}

impl BatchJob {
    /// Continues `state` for `duration` seconds with its masks frozen.
    pub fn continuation(sim: Simulation, state: SystemState, duration: f64) -> Self {
        let scenario = Scenario::quiet(state.t, state.t + duration);
        Self { sim, scenario, init: Some(state) }
    }

    pub fn run(&self) -> Result<Trajectory, SimError> {
        match &self.init {
            Some(s) => self.sim.run_from(&self.scenario, s.clone()),
            None => self.sim.run(&self.scenario),
        }
    }
}

/// Runs every job; results come back in job order.
pub fn run_batch(jobs: &[BatchJob]) -> Vec<Result<Trajectory, SimError>> {
    jobs.par_iter().map(BatchJob::run).collect()
}
