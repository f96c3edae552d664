//! Simulation and verification core for droop-controlled DC microgrids with
//! ZIP loads under a distributed consensus-based secondary controller.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. It is organised
//! bottom-up:
//!
//! - [`graph`]: electrical incidence matrices and the communication graph.
//! - [`model`]: physical parameters, the port-Hamiltonian matrices, the
//!   nonlinear right-hand side and the passivity-domain test.
//! - [`control`]: per-generator consensus agents and the
//!   control-by-interconnection matrices they are equivalent to.
//! - [`dispatch`]: economic dispatch in closed form and a Newton oracle for the
//!   closed-loop steady state.
//! - [`sim`]: event-driven time integration (RK4 and trapezoidal), trajectory
//!   recording and Lyapunov / passivity monitors.
//!
//! All quantities are SI: volts, amperes, ohms, henries, farads, seconds,
//! joules, and `$` for cost.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod control;
pub mod dispatch;
pub mod graph;
pub mod model;
pub mod sim;

mod linalg;

pub use nalgebra;

pub use control::{
    agent_step, cbi_matrices, controller_rhs, incremental_cost, AgentOutput, CbiMatrices,
    ConsensusNetwork, ControlError, ControllerConfig, ControllerState, NeighborMessage, NeighborView,
};
pub use dispatch::{
    equilibrium_control, kkt_residual, solve_closed_loop_equilibrium, solve_droop_equilibrium,
    solve_eic, weighted_average_voltage, weighted_average_voltage_among, DispatchError,
    DispatchSolution, EquilibriumControl, EquilibriumPoint, KktResidual,
};
pub use graph::{CommGraph, ElectricalGraph, GraphError};
pub use model::{
    BusSpec, GeneratorSpec, LineSpec, LoadMask, MicrogridSpec, ModelError, PhSystem,
    PhysicalState, ZipMask, V_FLOOR,
};
pub use sim::{
    apply_event, monitor_lyapunov, EventKind, InitialCondition, Integrator, IntegratorSettings,
    LyapunovMonitor, LyapunovStats, Sample, Scenario, ScenarioEvent, Segment, SimError, Simulation,
    SystemState, Trajectory,
};
