//! Physical microgrid model.
//!
//! State is `x = [phi_G; phi_E; q_N]` (connector fluxes, line fluxes, bus
//! charges) with Hamiltonian `H(x) = 0.5 x' Q x`, `Q = diag(1/L_G, 1/L_E, 1/C_N)`,
//! so that `grad H(x) = [I_G; I_E; V_N]`.
//!
//! [`dynamics_rhs`] evaluates the circuit equations directly (droop law
//! substituted into the connector equation) so load and generator masks stay
//! local edits. [`assemble_ph`] builds the matrix form `F grad H + g_P P + g u + E`
//! for analysis; both forms are checked against each other in tests.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::{ElectricalGraph, GraphError};

/// Constant-power load currents are not evaluated below this bus voltage.
pub const V_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{what} of {kind} {index} must be {requirement}, got {value}")]
    InvalidParameter {
        kind: &'static str,
        index: usize,
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("expected {expected} {what}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("constant-power load at bus {bus} evaluated at {voltage} V (floor is {V_FLOOR} V)")]
    CplSingularity { bus: usize, voltage: f64 },
    #[error("equilibrium charge at bus {bus} is {charge} C; it must be strictly positive")]
    InvalidEquilibrium { bus: usize, charge: f64 },
}

/// Droop-controlled grid-forming generator behind an RL output connector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    /// Droop coefficient `R_D` (V/A).
    pub droop: f64,
    /// Connector resistance `R_G` (ohm).
    pub resistance: f64,
    /// Connector inductance `L_G` (H).
    pub inductance: f64,
    /// Quadratic cost coefficient ($/A^2).
    pub alpha: f64,
    /// Linear cost coefficient ($/A).
    pub beta: f64,
    /// Constant cost ($).
    pub gamma: f64,
    /// Rated current (A). Informational; not enforced as a dispatch bound.
    pub rated_current: f64,
    /// Consensus integral gain `k_I`.
    pub k_i: f64,
}

impl GeneratorSpec {
    /// `C(I) = alpha I^2 + beta I + gamma`.
    pub fn cost(&self, current: f64) -> f64 {
        self.alpha * current * current + self.beta * current + self.gamma
    }

    /// Cost weights giving proportional current sharing:
    /// `alpha = 0.5 / I_rated`, `beta = gamma = 0`.
    pub fn with_proportional_sharing(mut self) -> Self {
        self.alpha = 0.5 / self.rated_current;
        self.beta = 0.0;
        self.gamma = 0.0;
        self
    }

    fn validate(&self, index: usize) -> Result<(), ModelError> {
        positive("generator", index, "droop", self.droop)?;
        positive("generator", index, "resistance", self.resistance)?;
        positive("generator", index, "inductance", self.inductance)?;
        positive("generator", index, "alpha", self.alpha)?;
        positive("generator", index, "k_i", self.k_i)?;
        finite("generator", index, "beta", self.beta)?;
        finite("generator", index, "gamma", self.gamma)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSpec {
    /// `R_E` (ohm).
    pub resistance: f64,
    /// `L_E` (H).
    pub inductance: f64,
}

/// Shunt capacitor plus ZIP load `I_L = G V + I + P / V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusSpec {
    /// `C_N` (F).
    pub capacitance: f64,
    /// Constant conductance `G_cte` (S).
    pub conductance: f64,
    /// Constant current `I_cte` (A). Negative values model grid-following sources.
    pub current: f64,
    /// Constant power `P_cte` (W). Negative values model grid-following sources.
    pub power: f64,
}

impl BusSpec {
    fn validate(&self, index: usize) -> Result<(), ModelError> {
        positive("bus", index, "capacitance", self.capacitance)?;
        if !(self.conductance >= 0.0) || !self.conductance.is_finite() {
            return Err(ModelError::InvalidParameter {
                kind: "bus",
                index,
                what: "conductance",
                requirement: "finite and >= 0",
                value: self.conductance,
            });
        }
        finite("bus", index, "current", self.current)?;
        finite("bus", index, "power", self.power)?;
        Ok(())
    }
}

fn positive(kind: &'static str, index: usize, what: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { kind, index, what, requirement: "finite and > 0", value })
    }
}

fn finite(kind: &'static str, index: usize, what: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { kind, index, what, requirement: "finite", value })
    }
}

/// On/off flags of the three ZIP components at one bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZipMask {
    pub z: bool,
    pub i: bool,
    pub p: bool,
}

impl ZipMask {
    pub const ALL: ZipMask = ZipMask { z: true, i: true, p: true };
    pub const NONE: ZipMask = ZipMask { z: false, i: false, p: false };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadMask(pub Vec<ZipMask>);

impl LoadMask {
    pub fn all_on(n_buses: usize) -> Self {
        Self(vec![ZipMask::ALL; n_buses])
    }

    pub fn all_off(n_buses: usize) -> Self {
        Self(vec![ZipMask::NONE; n_buses])
    }

    /// Z and I on, P off everywhere.
    pub fn without_cpl(n_buses: usize) -> Self {
        Self(vec![ZipMask { z: true, i: true, p: false }; n_buses])
    }

    pub fn get(&self, bus: usize) -> ZipMask {
        self.0[bus]
    }

    pub fn set_cpl(&mut self, bus: usize, on: bool) {
        self.0[bus].p = on;
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Complete physical description of a microgrid, in SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct MicrogridSpec {
    graph: ElectricalGraph,
    gens: Vec<GeneratorSpec>,
    lines: Vec<LineSpec>,
    buses: Vec<BusSpec>,
    v_nom: f64,
}

impl MicrogridSpec {
    pub fn new(
        graph: ElectricalGraph,
        gens: Vec<GeneratorSpec>,
        lines: Vec<LineSpec>,
        buses: Vec<BusSpec>,
        v_nom: f64,
    ) -> Result<Self, ModelError> {
        let check = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(ModelError::DimensionMismatch { what, expected, got })
            }
        };
        check("generators", graph.n_gens(), gens.len())?;
        check("lines", graph.n_lines(), lines.len())?;
        check("buses", graph.n_buses(), buses.len())?;
        for (i, g) in gens.iter().enumerate() {
            g.validate(i)?;
        }
        for (j, l) in lines.iter().enumerate() {
            positive("line", j, "resistance", l.resistance)?;
            positive("line", j, "inductance", l.inductance)?;
        }
        for (k, b) in buses.iter().enumerate() {
            b.validate(k)?;
        }
        positive("network", 0, "nominal voltage", v_nom)?;
        Ok(Self { graph, gens, lines, buses, v_nom })
    }

    pub fn graph(&self) -> &ElectricalGraph {
        &self.graph
    }

    pub fn gens(&self) -> &[GeneratorSpec] {
        &self.gens
    }

    pub fn lines(&self) -> &[LineSpec] {
        &self.lines
    }

    pub fn buses(&self) -> &[BusSpec] {
        &self.buses
    }

    pub fn v_nom(&self) -> f64 {
        self.v_nom
    }

    pub fn n_gens(&self) -> usize {
        self.gens.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Dimension of the physical state vector.
    pub fn n_states(&self) -> usize {
        self.n_gens() + self.n_lines() + self.n_buses()
    }

    /// Replaces the ZIP values of one bus (capacitance is kept).
    pub fn set_bus_load(
        &mut self,
        bus: usize,
        conductance: f64,
        current: f64,
        power: f64,
    ) -> Result<(), ModelError> {
        let n = self.buses.len();
        let Some(slot) = self.buses.get_mut(bus) else {
            return Err(ModelError::DimensionMismatch { what: "bus index bound", expected: n, got: bus });
        };
        let next = BusSpec { conductance, current, power, ..*slot };
        next.validate(bus)?;
        *slot = next;
        Ok(())
    }

    /// Replaces every generator's cost coefficients with the
    /// proportional-sharing preset.
    pub fn with_proportional_sharing(mut self) -> Self {
        for g in &mut self.gens {
            *g = g.with_proportional_sharing();
        }
        self
    }

    /// Constant-power load current `P / V` at `bus`, or a singularity error
    /// below [`V_FLOOR`].
    pub(crate) fn cpl_current(&self, bus: usize, voltage: f64) -> Result<f64, ModelError> {
        let p = self.buses[bus].power;
        if p == 0.0 {
            return Ok(0.0);
        }
        if !(voltage > V_FLOOR) {
            return Err(ModelError::CplSingularity { bus, voltage });
        }
        Ok(p / voltage)
    }

    /// Right-hand side on flat slices. `phi_g` entries of inactive generators
    /// are ignored (treated as zero current); their derivatives are zero.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn rhs_into(
        &self,
        phi_g: &[f64],
        phi_e: &[f64],
        q_n: &[f64],
        u: &[f64],
        loads: &LoadMask,
        gen_active: &[bool],
        d_phi_g: &mut [f64],
        d_phi_e: &mut [f64],
        d_q_n: &mut [f64],
    ) -> Result<(), ModelError> {
        let gen_bus = self.graph.gen_bus();
        for (k, bus) in self.buses.iter().enumerate() {
            let v = q_n[k] / bus.capacitance;
            let mask = loads.get(k);
            let mut load = 0.0;
            if mask.z {
                load += bus.conductance * v;
            }
            if mask.i {
                load += bus.current;
            }
            if mask.p {
                load += self.cpl_current(k, v)?;
            }
            d_q_n[k] = -load;
        }
        for (j, (line, &(from, to))) in self.lines.iter().zip(self.graph.line_endpoints()).enumerate() {
            let current = phi_e[j] / line.inductance;
            let v_from = q_n[from] / self.buses[from].capacitance;
            let v_to = q_n[to] / self.buses[to].capacitance;
            d_phi_e[j] = v_from - v_to - line.resistance * current;
            d_q_n[from] -= current;
            d_q_n[to] += current;
        }
        for (i, gen) in self.gens.iter().enumerate() {
            if !gen_active[i] {
                d_phi_g[i] = 0.0;
                continue;
            }
            let bus = gen_bus[i];
            let current = phi_g[i] / gen.inductance;
            let v_bus = q_n[bus] / self.buses[bus].capacitance;
            let v_gen = self.v_nom - gen.droop * current + u[i];
            d_phi_g[i] = v_gen - v_bus - gen.resistance * current;
            d_q_n[bus] += current;
        }
        Ok(())
    }
}

/// Physical state `[phi_G; phi_E; q_N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalState {
    pub phi_g: Vec<f64>,
    pub phi_e: Vec<f64>,
    pub q_n: Vec<f64>,
}

impl PhysicalState {
    pub fn zeros(spec: &MicrogridSpec) -> Self {
        Self {
            phi_g: vec![0.0; spec.n_gens()],
            phi_e: vec![0.0; spec.n_lines()],
            q_n: vec![0.0; spec.n_buses()],
        }
    }

    /// Builds the state from co-state values (currents and voltages).
    pub fn from_electrical(spec: &MicrogridSpec, i_g: &[f64], i_e: &[f64], v_n: &[f64]) -> Self {
        Self {
            phi_g: spec.gens.iter().zip(i_g).map(|(g, i)| g.inductance * i).collect(),
            phi_e: spec.lines.iter().zip(i_e).map(|(l, i)| l.inductance * i).collect(),
            q_n: spec.buses.iter().zip(v_n).map(|(b, v)| b.capacitance * v).collect(),
        }
    }

    pub fn gen_currents(&self, spec: &MicrogridSpec) -> Vec<f64> {
        self.phi_g.iter().zip(&spec.gens).map(|(p, g)| p / g.inductance).collect()
    }

    pub fn line_currents(&self, spec: &MicrogridSpec) -> Vec<f64> {
        self.phi_e.iter().zip(&spec.lines).map(|(p, l)| p / l.inductance).collect()
    }

    pub fn bus_voltages(&self, spec: &MicrogridSpec) -> Vec<f64> {
        self.q_n.iter().zip(&spec.buses).map(|(q, b)| q / b.capacitance).collect()
    }

    /// Stacked `[phi_G; phi_E; q_N]`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.phi_g.len() + self.phi_e.len() + self.q_n.len(),
            self.phi_g.iter().chain(&self.phi_e).chain(&self.q_n).copied(),
        )
    }

    pub fn from_vector(spec: &MicrogridSpec, x: &DVector<f64>) -> Self {
        let (ng, ne) = (spec.n_gens(), spec.n_lines());
        Self {
            phi_g: x.as_slice()[..ng].to_vec(),
            phi_e: x.as_slice()[ng..ng + ne].to_vec(),
            q_n: x.as_slice()[ng + ne..].to_vec(),
        }
    }

    fn check_dims(&self, spec: &MicrogridSpec) -> Result<(), ModelError> {
        for (what, expected, got) in [
            ("generator fluxes", spec.n_gens(), self.phi_g.len()),
            ("line fluxes", spec.n_lines(), self.phi_e.len()),
            ("bus charges", spec.n_buses(), self.q_n.len()),
        ] {
            if expected != got {
                return Err(ModelError::DimensionMismatch { what, expected, got });
            }
        }
        Ok(())
    }
}

/// Time derivative of the physical state under droop control with correction
/// input `u`, ZIP loads gated by `loads`, and generators gated by `gen_active`.
pub fn dynamics_rhs(
    spec: &MicrogridSpec,
    state: &PhysicalState,
    u: &[f64],
    loads: &LoadMask,
    gen_active: &[bool],
) -> Result<PhysicalState, ModelError> {
    state.check_dims(spec)?;
    if u.len() != spec.n_gens() {
        return Err(ModelError::DimensionMismatch { what: "inputs", expected: spec.n_gens(), got: u.len() });
    }
    let mut out = PhysicalState::zeros(spec);
    spec.rhs_into(
        &state.phi_g,
        &state.phi_e,
        &state.q_n,
        u,
        loads,
        gen_active,
        &mut out.phi_g,
        &mut out.phi_e,
        &mut out.q_n,
    )?;
    Ok(out)
}

/// Matrix form of the model: `x' = F Q x + g_P(x) P + g u + E`, `y = g' Q x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhSystem {
    /// Diagonal of `Q`.
    pub q: DVector<f64>,
    /// `F = J - R`.
    pub f: DMatrix<f64>,
    /// Input map `g = [I; 0; 0]`.
    pub g: DMatrix<f64>,
    /// Constant drift `E = [1 V_nom; 0; -I_cte]`.
    pub e: DVector<f64>,
    /// Constant-power values, masked.
    pub p: DVector<f64>,
    n_gens: usize,
    n_lines: usize,
}

impl PhSystem {
    /// Skew-symmetric part `(F - F') / 2`.
    pub fn j(&self) -> DMatrix<f64> {
        (&self.f - self.f.transpose()) * 0.5
    }

    /// Symmetric dissipation `-(F + F') / 2`.
    pub fn r(&self) -> DMatrix<f64> {
        (&self.f + self.f.transpose()) * -0.5
    }

    /// `grad H(x) = Q x`.
    pub fn grad_h(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_mul(&self.q)
    }

    /// `g_P(x) P`: bus rows carry `-P_k / V_k`.
    pub fn cpl_term(&self, x: &DVector<f64>) -> DVector<f64> {
        let off = self.n_gens + self.n_lines;
        let mut out = DVector::zeros(x.len());
        for k in 0..self.p.len() {
            let v = x[off + k] * self.q[off + k];
            out[off + k] = -self.p[k] / v;
        }
        out
    }

    /// Full right-hand side in matrix form.
    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.f * self.grad_h(x) + self.cpl_term(x) + &self.g * u + &self.e
    }

    /// Passive output `y = g' grad H(x)`, the generator currents.
    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        self.g.transpose() * self.grad_h(x)
    }
}

/// Assembles `(Q, F, g, E)` with every ZIP component active.
pub fn assemble_ph(spec: &MicrogridSpec) -> PhSystem {
    assemble_ph_with_loads(spec, &LoadMask::all_on(spec.n_buses()))
}

/// Assembles the matrix form with ZIP components gated by `loads`.
pub fn assemble_ph_with_loads(spec: &MicrogridSpec, loads: &LoadMask) -> PhSystem {
    let (ng, ne, nn) = (spec.n_gens(), spec.n_lines(), spec.n_buses());
    let n = ng + ne + nn;
    let (b_e, b_g) = spec.graph.incidence_matrices();

    let q = DVector::from_iterator(
        n,
        spec.gens
            .iter()
            .map(|g| 1.0 / g.inductance)
            .chain(spec.lines.iter().map(|l| 1.0 / l.inductance))
            .chain(spec.buses.iter().map(|b| 1.0 / b.capacitance)),
    );

    let mut f = DMatrix::zeros(n, n);
    for (i, g) in spec.gens.iter().enumerate() {
        f[(i, i)] = -(g.resistance + g.droop);
    }
    for (j, l) in spec.lines.iter().enumerate() {
        f[(ng + j, ng + j)] = -l.resistance;
    }
    for (k, b) in spec.buses.iter().enumerate() {
        let g = if loads.get(k).z { b.conductance } else { 0.0 };
        f[(ng + ne + k, ng + ne + k)] = -g;
    }
    for k in 0..nn {
        for i in 0..ng {
            f[(i, ng + ne + k)] = -b_g[(k, i)];
            f[(ng + ne + k, i)] = b_g[(k, i)];
        }
        for j in 0..ne {
            f[(ng + j, ng + ne + k)] = -b_e[(k, j)];
            f[(ng + ne + k, ng + j)] = b_e[(k, j)];
        }
    }

    let mut g = DMatrix::zeros(n, ng);
    for i in 0..ng {
        g[(i, i)] = 1.0;
    }

    let mut e = DVector::zeros(n);
    for i in 0..ng {
        e[i] = spec.v_nom;
    }
    for (k, b) in spec.buses.iter().enumerate() {
        if loads.get(k).i {
            e[ng + ne + k] = -b.current;
        }
    }

    let p = DVector::from_iterator(
        nn,
        spec.buses.iter().enumerate().map(|(k, b)| if loads.get(k).p { b.power } else { 0.0 }),
    );

    PhSystem { q, f, g, e, p, n_gens: ng, n_lines: ne }
}

fn load_values(spec: &MicrogridSpec, loads: &LoadMask, k: usize) -> (f64, f64) {
    let mask = loads.get(k);
    let b = &spec.buses[k];
    (if mask.z { b.conductance } else { 0.0 }, if mask.p { b.power } else { 0.0 })
}

/// Incremental dissipation matrix `R~(x~)`: block diagonal with
/// `R_G + R_D`, `R_E`, and `G_cte - P / (V_bar V)` on the bus block.
pub fn incremental_dissipation(
    spec: &MicrogridSpec,
    state: &PhysicalState,
    equilibrium: &PhysicalState,
    loads: &LoadMask,
) -> Result<DMatrix<f64>, ModelError> {
    let (ng, ne, nn) = (spec.n_gens(), spec.n_lines(), spec.n_buses());
    let mut r = DMatrix::zeros(ng + ne + nn, ng + ne + nn);
    for (i, g) in spec.gens.iter().enumerate() {
        r[(i, i)] = g.resistance + g.droop;
    }
    for (j, l) in spec.lines.iter().enumerate() {
        r[(ng + j, ng + j)] = l.resistance;
    }
    for k in 0..nn {
        let q_bar = equilibrium.q_n[k];
        if !(q_bar > 0.0) {
            return Err(ModelError::InvalidEquilibrium { bus: k, charge: q_bar });
        }
        let (g, p) = load_values(spec, loads, k);
        let c = spec.buses[k].capacitance;
        // P C^2 / (q_bar q), with q = q~ + q_bar.
        let g_p = if p == 0.0 { 0.0 } else { p * c * c / (q_bar * state.q_n[k]) };
        r[(ng + ne + k, ng + ne + k)] = g - g_p;
    }
    Ok(r)
}

/// Result of the passivity-domain membership test.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCheck {
    pub inside: bool,
    /// `G_cte,k - P_k / (V_bar_k V_k)` per bus (S).
    pub margins: Vec<f64>,
}

impl DomainCheck {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Per-bus margin of the local passivity condition `G_cte > P / (V_bar V)`.
pub(crate) fn domain_margin(conductance: f64, power: f64, v_bar: f64, v: f64) -> f64 {
    if power == 0.0 {
        return conductance;
    }
    let denom = v_bar * v;
    if !(denom > 0.0) {
        return f64::NEG_INFINITY;
    }
    conductance - power / denom
}

/// Tests membership of `state` in the passivity domain around `equilibrium`.
pub fn in_passivity_domain(
    spec: &MicrogridSpec,
    state: &PhysicalState,
    equilibrium: &PhysicalState,
    loads: &LoadMask,
) -> DomainCheck {
    let margins: Vec<f64> = (0..spec.n_buses())
        .map(|k| {
            let (g, p) = load_values(spec, loads, k);
            let c = spec.buses[k].capacitance;
            domain_margin(g, p, equilibrium.q_n[k] / c, state.q_n[k] / c)
        })
        .collect();
    let inside = margins.iter().all(|&m| m > 0.0);
    DomainCheck { inside, margins }
}

/// Stored energy `0.5 x' Q x` (J).
pub fn hamiltonian(spec: &MicrogridSpec, state: &PhysicalState) -> f64 {
    let mut h = 0.0;
    for (p, g) in state.phi_g.iter().zip(&spec.gens) {
        h += p * p / g.inductance;
    }
    for (p, l) in state.phi_e.iter().zip(&spec.lines) {
        h += p * p / l.inductance;
    }
    for (q, b) in state.q_n.iter().zip(&spec.buses) {
        h += q * q / b.capacitance;
    }
    0.5 * h
}

/// Storage function of the incremental model, `H(x - x_bar)`.
pub fn incremental_hamiltonian(
    spec: &MicrogridSpec,
    state: &PhysicalState,
    equilibrium: &PhysicalState,
) -> f64 {
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let dev = PhysicalState {
        phi_g: diff(&state.phi_g, &equilibrium.phi_g),
        phi_e: diff(&state.phi_e, &equilibrium.phi_e),
        q_n: diff(&state.q_n, &equilibrium.q_n),
    };
    hamiltonian(spec, &dev)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::{inf_norm, symmetric_eigenvalues};

    /// Single generator on a single bus, no lines.
    pub(crate) fn one_bus(conductance: f64, current: f64, power: f64) -> MicrogridSpec {
        let graph = ElectricalGraph::new(1, vec![], vec![0]).unwrap();
        let gen = GeneratorSpec {
            droop: 0.2,
            resistance: 0.25,
            inductance: 25e-6,
            alpha: 0.08,
            beta: 0.1,
            gamma: 0.2,
            rated_current: 15.0,
            k_i: 100.0,
        };
        let bus = BusSpec { capacitance: 22e-3, conductance, current, power };
        MicrogridSpec::new(graph, vec![gen], vec![], vec![bus], 48.0).unwrap()
    }

    /// Three buses in a line with two generators, CPLs at every bus.
    pub(crate) fn three_bus() -> MicrogridSpec {
        let graph = ElectricalGraph::new(3, vec![(0, 1), (1, 2)], vec![0, 2]).unwrap();
        let g = |droop, r, alpha, beta| GeneratorSpec {
            droop,
            resistance: r,
            inductance: r * 1e-4,
            alpha,
            beta,
            gamma: 0.1,
            rated_current: 10.0,
            k_i: 100.0,
        };
        let line = |r: f64| LineSpec { resistance: r, inductance: r * 1e-4 };
        let bus = |g: f64, i, p| BusSpec { capacitance: 22e-3, conductance: g, current: i, power: p };
        MicrogridSpec::new(
            graph,
            vec![g(0.2, 0.25, 0.08, 0.1), g(0.5, 0.2, 0.19, 0.25)],
            vec![line(0.5), line(1.0)],
            vec![bus(0.05, 0.5, 50.0), bus(0.1, 0.4, 80.0), bus(0.05, 0.3, 30.0)],
            48.0,
        )
        .unwrap()
    }

    #[test]
    fn minimal_block_form() {
        let spec = one_bus(0.1, 0.0, 0.0);
        let ph = assemble_ph(&spec);
        let expected = DMatrix::from_row_slice(2, 2, &[-(0.25 + 0.2), -1.0, 1.0, -0.1]);
        assert_eq!(ph.f, expected);
        assert_eq!(ph.e, DVector::from_row_slice(&[48.0, 0.0]));
    }

    #[test]
    fn skew_and_symmetric_parts_are_exact() {
        let spec = three_bus();
        let ph = assemble_ph(&spec);
        let j = ph.j();
        let r = ph.r();
        assert_eq!(j.transpose(), -&j);
        assert_eq!(r.transpose(), r);
        // F + F' only has diagonal entries.
        let sym = &ph.f + ph.f.transpose();
        for a in 0..sym.nrows() {
            for b in 0..sym.ncols() {
                if a != b {
                    assert_eq!(sym[(a, b)], 0.0);
                }
            }
        }
    }

    #[test]
    fn voltage_divider_equilibrium() {
        let g = 0.1;
        let spec = one_bus(g, 0.0, 0.0);
        let gen = spec.gens()[0];
        let v = 48.0 / (1.0 + (gen.resistance + gen.droop) * g);
        let i = g * v;
        let state = PhysicalState::from_electrical(&spec, &[i], &[], &[v]);
        let d = dynamics_rhs(&spec, &state, &[0.0], &LoadMask::all_on(1), &[true]).unwrap();
        assert!(d.phi_g[0].abs() < 1e-12 && d.q_n[0].abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn no_load_nominal_is_stationary() {
        let spec = three_bus();
        let state = PhysicalState::from_electrical(&spec, &[0.0, 0.0], &[0.0, 0.0], &[48.0; 3]);
        let d = dynamics_rhs(&spec, &state, &[0.0, 0.0], &LoadMask::all_off(3), &[true, true]).unwrap();
        assert!(inf_norm(d.to_vector().as_slice()) < 1e-12);
    }

    #[test]
    fn cpl_below_floor_is_an_error() {
        let spec = one_bus(0.1, 0.0, 100.0);
        let state = PhysicalState::from_electrical(&spec, &[0.0], &[], &[0.5]);
        let err = dynamics_rhs(&spec, &state, &[0.0], &LoadMask::all_on(1), &[true]).unwrap_err();
        assert_eq!(err, ModelError::CplSingularity { bus: 0, voltage: 0.5 });
        // Masked CPL is fine at the same voltage.
        dynamics_rhs(&spec, &state, &[0.0], &LoadMask::without_cpl(1), &[true]).unwrap();
    }

    #[test]
    fn inactive_generator_is_frozen_and_disconnected() {
        let spec = three_bus();
        let state = PhysicalState::from_electrical(&spec, &[3.0, 2.0], &[1.0, -1.0], &[47.0, 46.5, 46.0]);
        let loads = LoadMask::all_on(3);
        let on = dynamics_rhs(&spec, &state, &[0.0, 0.0], &loads, &[true, true]).unwrap();
        let off = dynamics_rhs(&spec, &state, &[0.0, 0.0], &loads, &[true, false]).unwrap();
        assert_eq!(off.phi_g[1], 0.0);
        let c = spec.buses()[2].capacitance;
        assert!((on.q_n[2] - off.q_n[2] - 2.0).abs() < 1e-12 * c.max(1.0));
    }

    #[test]
    fn dissipation_at_equilibrium_and_without_cpl() {
        let spec = three_bus();
        let eq = PhysicalState::from_electrical(&spec, &[3.0, 2.0], &[1.0, -1.0], &[47.0, 46.5, 46.0]);
        let r = incremental_dissipation(&spec, &eq, &eq, &LoadMask::all_on(3)).unwrap();
        let off = spec.n_gens() + spec.n_lines();
        for k in 0..3 {
            let b = spec.buses()[k];
            let v = eq.q_n[k] / b.capacitance;
            let expect = b.conductance - b.power / (v * v);
            assert!((r[(off + k, off + k)] - expect).abs() < 1e-15);
        }
        let r0 = incremental_dissipation(&spec, &eq, &eq, &LoadMask::without_cpl(3)).unwrap();
        assert_eq!(r0, assemble_ph_with_loads(&spec, &LoadMask::without_cpl(3)).r());
    }

    #[test]
    fn dissipation_rejects_nonpositive_equilibrium_charge() {
        let spec = one_bus(0.1, 0.0, 10.0);
        let eq = PhysicalState::from_electrical(&spec, &[0.0], &[], &[0.0]);
        let err = incremental_dissipation(&spec, &eq, &eq, &LoadMask::all_on(1)).unwrap_err();
        assert!(matches!(err, ModelError::InvalidEquilibrium { bus: 0, .. }));
    }

    // Reference network bus 7: G = 0.1 S, P = 0.8 * 0.1 * 48^2 = 184.32 W.
    #[test]
    fn table1_bus7_domain_margins() {
        let spec = one_bus(0.1, 0.45, 184.32);
        let loads = LoadMask::all_on(1);
        let eq = PhysicalState::from_electrical(&spec, &[0.0], &[], &[48.0]);
        let check = in_passivity_domain(&spec, &eq, &eq, &loads);
        assert!(check.inside);
        assert!((check.margins[0] - 0.02).abs() < 1e-15);

        // Finite-difference cross-check of the CPL incremental conductance.
        let dv: f64 = 1e-4;
        let slope = (184.32 / (48.0 + dv) - 184.32 / (48.0 - dv)) / (2.0 * dv);
        assert!((0.1 + slope - 0.02).abs() < 1e-9);

        let r = incremental_dissipation(&spec, &eq, &eq, &loads).unwrap();
        assert!((r[(1, 1)] - 0.02).abs() < 1e-15);

        let low = PhysicalState::from_electrical(&spec, &[0.0], &[], &[30.0]);
        let check = in_passivity_domain(&spec, &low, &eq, &loads);
        assert!(!check.inside);
        assert!((check.margins[0] - (0.1 - 0.128)).abs() < 1e-15);
    }

    #[test]
    fn domain_without_cpl_margins_are_conductances() {
        let spec = three_bus();
        let eq = PhysicalState::from_electrical(&spec, &[3.0, 2.0], &[1.0, -1.0], &[47.0, 46.5, 46.0]);
        let check = in_passivity_domain(&spec, &eq, &eq, &LoadMask::without_cpl(3));
        assert!(check.inside);
        let g: Vec<f64> = spec.buses().iter().map(|b| b.conductance).collect();
        assert_eq!(check.margins, g);
    }

    #[test]
    fn hamiltonian_values() {
        let spec = one_bus(0.1, 0.0, 0.0);
        assert_eq!(hamiltonian(&spec, &PhysicalState::zeros(&spec)), 0.0);

        let graph = ElectricalGraph::new(1, vec![], vec![]).unwrap();
        let cap = MicrogridSpec::new(
            graph,
            vec![],
            vec![],
            vec![BusSpec { capacitance: 2.0, conductance: 0.0, current: 0.0, power: 0.0 }],
            48.0,
        )
        .unwrap();
        let s = PhysicalState::from_electrical(&cap, &[], &[], &[3.0]);
        assert!((hamiltonian(&cap, &s) - 9.0).abs() < 1e-12);
        assert_eq!(incremental_hamiltonian(&cap, &s, &s), 0.0);
    }

    #[test]
    fn table1_like_dissipation_bound() {
        let spec = three_bus();
        let ph = assemble_ph(&spec);
        let eig = symmetric_eigenvalues(&ph.r());
        let bound = spec
            .gens()
            .iter()
            .map(|g| g.resistance + g.droop)
            .chain(spec.lines().iter().map(|l| l.resistance))
            .chain(spec.buses().iter().map(|b| b.conductance))
            .fold(f64::INFINITY, f64::min);
        assert!((eig[0] - bound).abs() < 1e-12);
    }

    #[test]
    fn set_bus_load_validates() {
        let mut spec = three_bus();
        spec.set_bus_load(1, 0.2, 0.1, 10.0).unwrap();
        assert_eq!(spec.buses()[1].conductance, 0.2);
        assert!(spec.set_bus_load(1, -0.2, 0.1, 10.0).is_err());
        assert!(spec.set_bus_load(7, 0.2, 0.1, 10.0).is_err());
    }
}
