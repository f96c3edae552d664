//! Distributed consensus-based secondary control.
//!
//! Each generator runs one agent. Agent `i` measures its own connector
//! current, computes its incremental cost `lambda_i = 2 alpha_i I_i + beta_i`,
//! and receives `(lambda_j, x_j)` from its active neighbors only:
//!
//! ```text
//! z_i^lambda = sum_j a_ij (lambda_j - lambda_i)
//! z_i^c      = sum_j a_ij (x_j - x_i)
//! u_i        = R_D,i I_i + 2 alpha_i (k_P z_i^lambda - z_i^c)
//! dx_i/dt    = k_I,i z_i^lambda
//! ```
//!
//! [`CbiMatrices`] holds the equivalent interconnection form
//! `u = -r y - w^-1 y_c + b`, `u_c = w^-T y + b_c`, used for verification.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::CommGraph;
use crate::model::GeneratorSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("proportional gain k_P must be finite and >= 0, got {0}")]
    NegativeGain(f64),
    #[error("sample period must be finite and > 0, got {0}")]
    InvalidSamplePeriod(f64),
    #[error("communication graph has {got} nodes but there are {expected} generators")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Global proportional gain `k_P`.
    pub k_p: f64,
    pub comm: CommGraph,
    /// Secondary layer active. When false every agent outputs zero (pure droop).
    pub enabled: bool,
    /// Sample-and-hold period for neighbor data. `None` is continuous exchange.
    pub sample_period: Option<f64>,
}

impl ControllerConfig {
    pub fn new(k_p: f64, comm: CommGraph, enabled: bool) -> Result<Self, ControlError> {
        if !(k_p >= 0.0) || !k_p.is_finite() {
            return Err(ControlError::NegativeGain(k_p));
        }
        Ok(Self { k_p, comm, enabled, sample_period: None })
    }

    pub fn with_sample_period(mut self, period: Option<f64>) -> Result<Self, ControlError> {
        if let Some(p) = period {
            if !(p > 0.0) || !p.is_finite() {
                return Err(ControlError::InvalidSamplePeriod(p));
            }
        }
        self.sample_period = period;
        Ok(self)
    }

    pub fn check_generators(&self, n_gens: usize) -> Result<(), ControlError> {
        if self.comm.n_nodes() != n_gens {
            return Err(ControlError::DimensionMismatch { expected: n_gens, got: self.comm.n_nodes() });
        }
        Ok(())
    }
}

/// Integrator states and participation flags of all agents.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub x_c: Vec<f64>,
    /// Plug-and-play participation. Inactive agents hold `x_c` frozen and
    /// exchange no messages.
    pub active: Vec<bool>,
}

impl ControllerState {
    pub fn new(n_gens: usize) -> Self {
        Self { x_c: vec![0.0; n_gens], active: vec![true; n_gens] }
    }
}

/// One message received by an agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborMessage {
    pub id: usize,
    pub weight: f64,
    pub lambda: f64,
    pub x_c: f64,
}

/// What agent `i` can see of the rest of the system.
#[derive(Debug, Clone, Copy)]
pub struct NeighborView<'a> {
    messages: &'a [NeighborMessage],
}

impl<'a> NeighborView<'a> {
    pub fn new(messages: &'a [NeighborMessage]) -> Self {
        Self { messages }
    }

    pub fn empty() -> NeighborView<'static> {
        NeighborView { messages: &[] }
    }

    pub fn messages(&self) -> &'a [NeighborMessage] {
        self.messages
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentOutput {
    /// Droop correction `u_i` (V).
    pub u: f64,
    /// Integrator rate `dx_i/dt`.
    pub dx_c: f64,
    pub z_lambda: f64,
    pub z_c: f64,
}

/// Incremental cost `dC/dI = 2 alpha I + beta` ($/A).
pub fn incremental_cost(gen: &GeneratorSpec, current: f64) -> f64 {
    2.0 * gen.alpha * current + gen.beta
}

/// One agent's control law. Returns zeros when the secondary layer is off.
pub fn agent_step(
    gen: &GeneratorSpec,
    cfg: &ControllerConfig,
    x_c: f64,
    current: f64,
    view: NeighborView<'_>,
) -> AgentOutput {
    if !cfg.enabled {
        return AgentOutput { u: 0.0, dx_c: 0.0, z_lambda: 0.0, z_c: 0.0 };
    }
    let lambda = incremental_cost(gen, current);
    let mut z_lambda = 0.0;
    let mut z_c = 0.0;
    for m in view.messages() {
        z_lambda += m.weight * (m.lambda - lambda);
        z_c += m.weight * (m.x_c - x_c);
    }
    AgentOutput {
        u: gen.droop * current + 2.0 * gen.alpha * (cfg.k_p * z_lambda - z_c),
        dx_c: gen.k_i * z_lambda,
        z_lambda,
        z_c,
    }
}

/// Values an agent publishes to its neighbors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Broadcast {
    pub lambda: f64,
    pub x_c: f64,
}

/// Communication topology restricted to active agents and active links.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusNetwork {
    neighbors: Vec<Vec<(usize, f64)>>,
    active: Vec<bool>,
}

impl ConsensusNetwork {
    /// `link_on` is indexed like [`CommGraph::links`]; missing entries count
    /// as on.
    pub fn new(comm: &CommGraph, active: &[bool], link_on: &[bool]) -> Self {
        let masked = comm.masked(active, link_on);
        let neighbors = (0..comm.n_nodes()).map(|i| masked.neighbors(i).collect()).collect();
        Self { neighbors, active: active.to_vec() }
    }

    pub fn full(comm: &CommGraph) -> Self {
        Self::new(comm, &vec![true; comm.n_nodes()], &[])
    }

    pub fn n_nodes(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    /// Laplacian of the effective graph; rows/columns of inactive agents are zero.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        let mut lap = DMatrix::zeros(n, n);
        for i in 0..n {
            for &(j, w) in &self.neighbors[i] {
                lap[(i, j)] -= w;
                lap[(i, i)] += w;
            }
        }
        lap
    }

    /// Connectivity among active agents.
    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        let Some(start) = (0..n).find(|&i| self.active[i]) else {
            return true;
        };
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for &(j, _) in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        (0..n).all(|i| !self.active[i] || seen[i])
    }

    /// Live broadcast values for every agent.
    pub fn broadcasts(&self, gens: &[GeneratorSpec], x_c: &[f64], currents: &[f64], out: &mut Vec<Broadcast>) {
        out.clear();
        out.extend(
            gens.iter()
                .zip(x_c)
                .zip(currents)
                .map(|((g, &x), &i)| Broadcast { lambda: incremental_cost(g, i), x_c: x }),
        );
    }

    /// Evaluates every active agent against the published `broadcast`
    /// table. Inactive agents get `u = 0`, `dx_c = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        cfg: &ControllerConfig,
        gens: &[GeneratorSpec],
        x_c: &[f64],
        currents: &[f64],
        broadcast: &[Broadcast],
        outputs: &mut [AgentOutput],
        scratch: &mut Vec<NeighborMessage>,
    ) {
        for i in 0..self.n_nodes() {
            if !self.active[i] {
                outputs[i] = AgentOutput { u: 0.0, dx_c: 0.0, z_lambda: 0.0, z_c: 0.0 };
                continue;
            }
            scratch.clear();
            scratch.extend(self.neighbors[i].iter().map(|&(j, weight)| NeighborMessage {
                id: j,
                weight,
                lambda: broadcast[j].lambda,
                x_c: broadcast[j].x_c,
            }));
            outputs[i] = agent_step(&gens[i], cfg, x_c[i], currents[i], NeighborView::new(scratch));
        }
    }
}

/// Stacks [`agent_step`] over all agents with continuous exchange.
/// Returns `(u, dx_c)`.
pub fn controller_rhs(
    cfg: &ControllerConfig,
    gens: &[GeneratorSpec],
    net: &ConsensusNetwork,
    x_c: &[f64],
    currents: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut broadcast = Vec::with_capacity(gens.len());
    net.broadcasts(gens, x_c, currents, &mut broadcast);
    let mut outputs = vec![AgentOutput { u: 0.0, dx_c: 0.0, z_lambda: 0.0, z_c: 0.0 }; gens.len()];
    let mut scratch = Vec::new();
    net.evaluate(cfg, gens, x_c, currents, &broadcast, &mut outputs, &mut scratch);
    (outputs.iter().map(|o| o.u).collect(), outputs.iter().map(|o| o.dx_c).collect())
}

/// Interconnection matrices `(w, r, b, b_c)` with
/// `w = (2 alpha)^-1`, `r = -R_D + k_P (2 alpha) L (2 alpha)`,
/// `b = -k_P (2 alpha) L beta`, `b_c = beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CbiMatrices {
    pub w: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub b: DVector<f64>,
    pub b_c: DVector<f64>,
}

impl CbiMatrices {
    pub fn from_laplacian(gens: &[GeneratorSpec], k_p: f64, laplacian: &DMatrix<f64>) -> Self {
        let n = gens.len();
        let two_alpha = DMatrix::from_diagonal(&DVector::from_iterator(n, gens.iter().map(|g| 2.0 * g.alpha)));
        let droop = DMatrix::from_diagonal(&DVector::from_iterator(n, gens.iter().map(|g| g.droop)));
        let beta = DVector::from_iterator(n, gens.iter().map(|g| g.beta));
        let w = DMatrix::from_diagonal(&DVector::from_iterator(n, gens.iter().map(|g| 1.0 / (2.0 * g.alpha))));
        let r = -droop + (&two_alpha * laplacian * &two_alpha) * k_p;
        let b = (&two_alpha * laplacian * &beta) * -k_p;
        Self { w, r, b, b_c: beta }
    }

    /// `w^-1 = 2 alpha`.
    pub fn w_inv(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.w.diagonal().map(|x| 1.0 / x))
    }

    /// `u = -r y - w^-1 y_c + b`.
    pub fn plant_input(&self, y: &DVector<f64>, y_c: &DVector<f64>) -> DVector<f64> {
        -(&self.r * y) - self.w_inv() * y_c + &self.b
    }

    /// `u_c = w^-T y + b_c`.
    pub fn controller_input(&self, y: &DVector<f64>) -> DVector<f64> {
        self.w_inv().transpose() * y + &self.b_c
    }
}

pub fn cbi_matrices(gens: &[GeneratorSpec], cfg: &ControllerConfig) -> CbiMatrices {
    CbiMatrices::from_laplacian(gens, cfg.k_p, &cfg.comm.laplacian())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;

    fn dg(alpha: f64, beta: f64, droop: f64) -> GeneratorSpec {
        GeneratorSpec {
            droop,
            resistance: 0.25,
            inductance: 25e-6,
            alpha,
            beta,
            gamma: 0.0,
            rated_current: 10.0,
            k_i: 100.0,
        }
    }

    fn dg1() -> GeneratorSpec {
        dg(0.08, 0.1, 0.2)
    }

    fn cfg(n: usize, links: &[(usize, usize, f64)]) -> ControllerConfig {
        ControllerConfig::new(2.0, CommGraph::from_links(n, links).unwrap(), true).unwrap()
    }

    #[test]
    fn incremental_cost_values() {
        assert!((incremental_cost(&dg1(), 0.0) - 0.1).abs() < 1e-15);
        assert!((incremental_cost(&dg1(), 5.0) - 0.9).abs() < 1e-15);
        let preset = GeneratorSpec { rated_current: 12.0, ..dg1() }.with_proportional_sharing();
        assert!((incremental_cost(&preset, 12.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn consensus_cancels_droop() {
        let c = cfg(2, &[(0, 1, 1.0)]);
        let lambda = incremental_cost(&dg1(), 4.0);
        let msg = [NeighborMessage { id: 1, weight: 1.0, lambda, x_c: 0.3 }];
        let out = agent_step(&dg1(), &c, 0.3, 4.0, NeighborView::new(&msg));
        assert_eq!(out.u, 0.2 * 4.0);
        assert_eq!(out.dx_c, 0.0);

        let out = agent_step(&dg1(), &c, 0.7, 4.0, NeighborView::empty());
        assert_eq!(out.u, 0.2 * 4.0);
        assert_eq!(out.dx_c, 0.0);
    }

    #[test]
    fn hand_evaluated_agent_step() {
        let c = cfg(2, &[(0, 1, 1.0)]);
        let msg = [NeighborMessage { id: 1, weight: 1.0, lambda: 1.0, x_c: 0.0 }];
        let out = agent_step(&dg1(), &c, 0.0, 5.0, NeighborView::new(&msg));
        assert!((out.z_lambda - 0.1).abs() < 1e-15);
        assert!((out.u - 1.032).abs() < 1e-12, "u = {}", out.u);
        assert!((out.dx_c - 10.0).abs() < 1e-12);
    }

    #[test]
    fn disabled_agent_outputs_zero() {
        let mut c = cfg(2, &[(0, 1, 1.0)]);
        c.enabled = false;
        let msg = [NeighborMessage { id: 1, weight: 1.0, lambda: 3.0, x_c: 2.0 }];
        let out = agent_step(&dg1(), &c, 0.0, 5.0, NeighborView::new(&msg));
        assert_eq!((out.u, out.dx_c), (0.0, 0.0));
    }

    #[test]
    fn cbi_with_zero_gain() {
        let gens = [dg1(), dg(0.19, 0.25, 0.5)];
        let mut c = cfg(2, &[(0, 1, 1.0)]);
        c.k_p = 0.0;
        let m = cbi_matrices(&gens, &c);
        assert_eq!(m.r, DMatrix::from_diagonal(&DVector::from_row_slice(&[-0.2, -0.5])));
        assert_eq!(m.b, DVector::zeros(2));
    }

    #[test]
    fn cbi_single_generator() {
        let c = cfg(1, &[]);
        let m = cbi_matrices(&[dg1()], &c);
        assert_eq!(m.r[(0, 0)], -0.2);
        assert_eq!(m.b[0], 0.0);
        assert_eq!(m.b_c[0], 0.1);
    }

    #[test]
    fn droop_plus_r_is_laplacian_congruence() {
        let gens = [dg1(), dg(0.19, 0.25, 0.5), dg(0.1, 0.12, 0.25)];
        let c = cfg(3, &[(0, 1, 1.0), (1, 2, 2.0)]);
        let m = cbi_matrices(&gens, &c);
        let droop = DMatrix::from_diagonal(&DVector::from_iterator(3, gens.iter().map(|g| g.droop)));
        let sum = &m.r + droop;
        let eig = symmetric_eigenvalues(&sum);
        assert!(eig[0].abs() < 1e-12);
        assert!(eig[1] > 0.0);
        // Null vector (2 alpha)^-1 1.
        let v = DVector::from_iterator(3, gens.iter().map(|g| 1.0 / (2.0 * g.alpha)));
        assert!((&sum * v).amax() < 1e-12);
    }

    #[test]
    fn masked_agent_drops_out() {
        let gens = [dg1(), dg(0.19, 0.25, 0.5), dg(0.1, 0.12, 0.25)];
        let c = cfg(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]);
        let net = ConsensusNetwork::new(&c.comm, &[true, true, false], &[]);
        assert!(net.neighbors(0).iter().all(|&(j, _)| j != 2));
        let (u, dx) = controller_rhs(&c, &gens, &net, &[0.1, 0.2, 5.0], &[3.0, 2.0, 9.0]);
        assert_eq!((u[2], dx[2]), (0.0, 0.0));
        let lap = net.laplacian();
        assert_eq!(lap.row(2).sum(), 0.0);
        assert_eq!(lap[(2, 2)], 0.0);
        // Agent 0 only sees agent 1.
        let z = incremental_cost(&gens[1], 2.0) - incremental_cost(&gens[0], 3.0);
        assert!((dx[0] - 100.0 * z).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        let comm = CommGraph::from_links(2, &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(ControllerConfig::new(-1.0, comm.clone(), true), Err(ControlError::NegativeGain(_))));
        let c = ControllerConfig::new(1.0, comm, true).unwrap();
        assert!(c.clone().with_sample_period(Some(0.0)).is_err());
        assert!(c.check_generators(3).is_err());
    }
}
