//! Economic dispatch and the closed-loop equilibrium oracle.
//!
//! The oracle solves the steady state of the circuit equations directly as an
//! algebraic system and never calls the simulator's right-hand side.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::control::{incremental_cost, ConsensusNetwork, ControllerConfig};
use crate::linalg::{inf_norm, solve};
use crate::model::{GeneratorSpec, LoadMask, MicrogridSpec, ModelError, PhysicalState, V_FLOOR};

/// Newton stops once the residual infinity norm is below this.
pub const RESIDUAL_TOL: f64 = 1e-11;
pub const MAX_ITERATIONS: usize = 50;
pub const MAX_HALVINGS: usize = 8;
/// Roots with any bus below this fraction of nominal are flagged.
pub const LOW_VOLTAGE_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("dispatch needs at least one generator")]
    NoGenerators,
    #[error("generator {index} has alpha = {alpha}; dispatch needs alpha > 0")]
    NonConvexCost { index: usize, alpha: f64 },
    #[error("communication graph over the active generators is disconnected")]
    Disconnected,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NoEquilibrium { iterations: usize, residual: f64, last: Box<EquilibriumPoint> },
    #[error("bus {bus} voltage left ({V_FLOOR}, inf) during the Newton iteration (reached {voltage} V)")]
    Infeasible { bus: usize, voltage: f64 },
    #[error("singular Newton Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("equilibrium is inconsistent with the consensus controller (weighted mismatch {mismatch:e})")]
    InconsistentEquilibrium { mismatch: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub lambda_opt: f64,
    pub currents: Vec<f64>,
    pub total_cost: f64,
}

/// Closed-form equal-incremental-cost dispatch of `demand` amperes.
/// Currents are unconstrained in sign.
pub fn solve_eic(gens: &[GeneratorSpec], demand: f64) -> Result<DispatchSolution, DispatchError> {
    if gens.is_empty() {
        return Err(DispatchError::NoGenerators);
    }
    if let Some((index, g)) = gens.iter().enumerate().find(|(_, g)| !(g.alpha > 0.0)) {
        return Err(DispatchError::NonConvexCost { index, alpha: g.alpha });
    }
    let inv_sum: f64 = gens.iter().map(|g| 1.0 / (2.0 * g.alpha)).sum();
    let beta_sum: f64 = gens.iter().map(|g| g.beta / (2.0 * g.alpha)).sum();
    let lambda_opt = (demand + beta_sum) / inv_sum;
    let currents: Vec<f64> = gens.iter().map(|g| (lambda_opt - g.beta) / (2.0 * g.alpha)).collect();
    let total_cost = gens.iter().zip(&currents).map(|(g, &i)| g.cost(i)).sum();
    Ok(DispatchSolution { lambda_opt, currents, total_cost })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktResidual {
    /// `max_ij |lambda_i - lambda_j|`.
    pub spread: f64,
    pub lambdas: Vec<f64>,
}

pub fn kkt_residual(gens: &[GeneratorSpec], currents: &[f64]) -> KktResidual {
    let lambdas: Vec<f64> = gens.iter().zip(currents).map(|(g, &i)| incremental_cost(g, i)).collect();
    KktResidual { spread: spread(&lambdas), lambdas }
}

pub(crate) fn spread(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// `sum w_i V_i / sum w_i` with `w_i = 1 / (2 alpha_i)`.
pub fn weighted_average_voltage(gens: &[GeneratorSpec], v_gen: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (g, &v) in gens.iter().zip(v_gen) {
        let w = 1.0 / (2.0 * g.alpha);
        num += w * v;
        den += w;
    }
    num / den
}

/// Weighted average over the active generators only.
pub fn weighted_average_voltage_among(gens: &[GeneratorSpec], v_gen: &[f64], active: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((g, &v), &on) in gens.iter().zip(v_gen).zip(active) {
        if on {
            let w = 1.0 / (2.0 * g.alpha);
            num += w * v;
            den += w;
        }
    }
    num / den
}

/// A steady state of the microgrid.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    /// Generator terminal voltages. Inactive generators report their bus voltage.
    pub v_gen: Vec<f64>,
    /// Connector currents; zero for inactive generators.
    pub i_g: Vec<f64>,
    pub i_e: Vec<f64>,
    pub v_n: Vec<f64>,
    /// Consensus incremental cost; `None` for droop-only equilibria.
    pub lambda_opt: Option<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub active: Vec<bool>,
    /// Some bus sits below 70 % of nominal: probably the low-voltage root.
    pub low_voltage_branch: bool,
}

impl EquilibriumPoint {
    pub fn physical_state(&self, spec: &MicrogridSpec) -> PhysicalState {
        PhysicalState::from_electrical(spec, &self.i_g, &self.i_e, &self.v_n)
    }

    pub fn lambdas(&self, gens: &[GeneratorSpec]) -> Vec<f64> {
        gens.iter().zip(&self.i_g).map(|(g, &i)| incremental_cost(g, i)).collect()
    }

    /// Incremental-cost spread over the active generators.
    pub fn lambda_spread(&self, gens: &[GeneratorSpec]) -> f64 {
        let l: Vec<f64> = self
            .lambdas(gens)
            .into_iter()
            .zip(&self.active)
            .filter_map(|(l, &on)| on.then_some(l))
            .collect();
        spread(&l)
    }

    pub fn weighted_average_voltage(&self, gens: &[GeneratorSpec]) -> f64 {
        weighted_average_voltage_among(gens, &self.v_gen, &self.active)
    }
}

/// How generator voltages are pinned in the steady state.
#[derive(Debug, Clone, PartialEq)]
enum GeneratorLaw<'a> {
    /// Equal incremental costs plus the weighted-average voltage condition.
    Secondary,
    /// `V_i = V_nom - R_D I_i + u_i` with fixed `u`.
    Droop { u: &'a [f64] },
}

/// Steady state under the consensus controller: equal incremental costs
/// across active generators and weighted-average voltage at nominal.
pub fn solve_closed_loop_equilibrium(
    spec: &MicrogridSpec,
    cfg: &ControllerConfig,
    loads: &LoadMask,
    active: &[bool],
) -> Result<EquilibriumPoint, DispatchError> {
    if !cfg.comm.is_connected_among(active) {
        return Err(DispatchError::Disconnected);
    }
    NewtonSystem::new(spec, loads, active, GeneratorLaw::Secondary)?.solve()
}

/// Steady state under pure droop with a constant correction `u`
/// (`u = 0` is the pre-activation operating point).
pub fn solve_droop_equilibrium(
    spec: &MicrogridSpec,
    loads: &LoadMask,
    active: &[bool],
    u: &[f64],
) -> Result<EquilibriumPoint, DispatchError> {
    NewtonSystem::new(spec, loads, active, GeneratorLaw::Droop { u })?.solve()
}

struct NewtonSystem<'a> {
    spec: &'a MicrogridSpec,
    loads: &'a LoadMask,
    active_mask: &'a [bool],
    law: GeneratorLaw<'a>,
    active: Vec<usize>,
}

impl<'a> NewtonSystem<'a> {
    fn new(
        spec: &'a MicrogridSpec,
        loads: &'a LoadMask,
        active_mask: &'a [bool],
        law: GeneratorLaw<'a>,
    ) -> Result<Self, DispatchError> {
        let check = |what, got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(DispatchError::Model(ModelError::DimensionMismatch { what, expected, got }))
            }
        };
        check("generator flags", active_mask.len(), spec.n_gens())?;
        check("bus load masks", loads.len(), spec.n_buses())?;
        if let GeneratorLaw::Droop { u } = &law {
            check("droop inputs", u.len(), spec.n_gens())?;
        }
        let active: Vec<usize> = (0..spec.n_gens()).filter(|&i| active_mask[i]).collect();
        if active.is_empty() {
            return Err(DispatchError::NoGenerators);
        }
        Ok(Self { spec, loads, active_mask, law, active })
    }

    fn secondary(&self) -> bool {
        matches!(self.law, GeneratorLaw::Secondary)
    }

    fn na(&self) -> usize {
        self.active.len()
    }

    fn dim(&self) -> usize {
        2 * self.na() + self.spec.n_lines() + self.spec.n_buses() + usize::from(self.secondary())
    }

    // Unknown layout: [V_gen(active), I_G(active), I_E, V_N, (lambda)].
    fn off_ig(&self) -> usize {
        self.na()
    }
    fn off_ie(&self) -> usize {
        2 * self.na()
    }
    fn off_vn(&self) -> usize {
        2 * self.na() + self.spec.n_lines()
    }
    fn idx_lambda(&self) -> usize {
        self.off_vn() + self.spec.n_buses()
    }

    fn bus_load(&self, k: usize) -> (f64, f64, f64) {
        let b = self.spec.buses()[k];
        let m = self.loads.get(k);
        (
            if m.z { b.conductance } else { 0.0 },
            if m.i { b.current } else { 0.0 },
            if m.p { b.power } else { 0.0 },
        )
    }

    fn initial_guess(&self) -> Result<DVector<f64>, DispatchError> {
        let v_nom = self.spec.v_nom();
        let demand: f64 = (0..self.spec.n_buses())
            .map(|k| {
                let (g, i, p) = self.bus_load(k);
                g * v_nom + i + p / v_nom
            })
            .sum();
        let gens: Vec<GeneratorSpec> = self.active.iter().map(|&i| self.spec.gens()[i]).collect();
        let eic = solve_eic(&gens, demand)?;
        let mut z = DVector::zeros(self.dim());
        for a in 0..self.na() {
            z[a] = v_nom;
            z[self.off_ig() + a] = eic.currents[a];
        }
        for k in 0..self.spec.n_buses() {
            z[self.off_vn() + k] = v_nom;
        }
        if self.secondary() {
            z[self.idx_lambda()] = eic.lambda_opt;
        }
        Ok(z)
    }

    fn residual(&self, z: &DVector<f64>) -> DVector<f64> {
        let spec = self.spec;
        let na = self.na();
        let (off_ig, off_ie, off_vn) = (self.off_ig(), self.off_ie(), self.off_vn());
        let mut r = DVector::zeros(self.dim());
        let mut row = 0;
        // Generator law.
        for (a, &i) in self.active.iter().enumerate() {
            let g = spec.gens()[i];
            let (v, cur) = (z[a], z[off_ig + a]);
            r[row] = match &self.law {
                GeneratorLaw::Secondary => 2.0 * g.alpha * cur + g.beta - z[self.idx_lambda()],
                GeneratorLaw::Droop { u } => v - spec.v_nom() + g.droop * cur - u[i],
            };
            row += 1;
        }
        // Connector voltage drop.
        for (a, &i) in self.active.iter().enumerate() {
            let g = spec.gens()[i];
            let bus = spec.graph().gen_bus()[i];
            r[row] = z[a] - z[off_vn + bus] - g.resistance * z[off_ig + a];
            row += 1;
        }
        // Line voltage drop.
        for (j, (l, &(from, to))) in spec.lines().iter().zip(spec.graph().line_endpoints()).enumerate() {
            r[row] = z[off_vn + from] - z[off_vn + to] - l.resistance * z[off_ie + j];
            row += 1;
        }
        // Kirchhoff current law per bus.
        for k in 0..spec.n_buses() {
            let v = z[off_vn + k];
            let (g, i, p) = self.bus_load(k);
            r[row + k] = -(g * v + i + if p == 0.0 { 0.0 } else { p / v });
        }
        for (j, &(from, to)) in spec.graph().line_endpoints().iter().enumerate() {
            r[row + from] -= z[off_ie + j];
            r[row + to] += z[off_ie + j];
        }
        for (a, &i) in self.active.iter().enumerate() {
            r[row + spec.graph().gen_bus()[i]] += z[off_ig + a];
        }
        row += spec.n_buses();
        if self.secondary() {
            r[row] = self
                .active
                .iter()
                .enumerate()
                .map(|(a, &i)| (z[a] - spec.v_nom()) / (2.0 * spec.gens()[i].alpha))
                .sum();
        }
        debug_assert!(na <= row);
        r
    }

    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let spec = self.spec;
        let n = self.dim();
        let (off_ig, off_ie, off_vn) = (self.off_ig(), self.off_ie(), self.off_vn());
        let mut jac = DMatrix::zeros(n, n);
        let mut row = 0;
        for (a, &i) in self.active.iter().enumerate() {
            let g = spec.gens()[i];
            match &self.law {
                GeneratorLaw::Secondary => {
                    jac[(row, off_ig + a)] = 2.0 * g.alpha;
                    jac[(row, self.idx_lambda())] = -1.0;
                }
                GeneratorLaw::Droop { .. } => {
                    jac[(row, a)] = 1.0;
                    jac[(row, off_ig + a)] = g.droop;
                }
            }
            row += 1;
        }
        for (a, &i) in self.active.iter().enumerate() {
            let g = spec.gens()[i];
            jac[(row, a)] = 1.0;
            jac[(row, off_vn + spec.graph().gen_bus()[i])] = -1.0;
            jac[(row, off_ig + a)] = -g.resistance;
            row += 1;
        }
        for (j, (l, &(from, to))) in spec.lines().iter().zip(spec.graph().line_endpoints()).enumerate() {
            jac[(row, off_vn + from)] = 1.0;
            jac[(row, off_vn + to)] = -1.0;
            jac[(row, off_ie + j)] = -l.resistance;
            row += 1;
        }
        for k in 0..spec.n_buses() {
            let v = z[off_vn + k];
            let (g, _, p) = self.bus_load(k);
            let dp = if p == 0.0 { 0.0 } else { p / (v * v) };
            jac[(row + k, off_vn + k)] = -g + dp;
        }
        for (j, &(from, to)) in spec.graph().line_endpoints().iter().enumerate() {
            jac[(row + from, off_ie + j)] -= 1.0;
            jac[(row + to, off_ie + j)] += 1.0;
        }
        for (a, &i) in self.active.iter().enumerate() {
            jac[(row + spec.graph().gen_bus()[i], off_ig + a)] += 1.0;
        }
        row += spec.n_buses();
        if self.secondary() {
            for (a, &i) in self.active.iter().enumerate() {
                jac[(row, a)] = 1.0 / (2.0 * spec.gens()[i].alpha);
            }
        }
        jac
    }

    /// First bus with an active constant-power load at or below the floor.
    fn floor_violation(&self, z: &DVector<f64>) -> Option<(usize, f64)> {
        (0..self.spec.n_buses()).find_map(|k| {
            let v = z[self.off_vn() + k];
            let (_, _, p) = self.bus_load(k);
            (p != 0.0 && !(v > V_FLOOR)).then_some((k, v))
        })
    }

    fn point(&self, z: &DVector<f64>, residual_norm: f64, iterations: usize) -> EquilibriumPoint {
        let spec = self.spec;
        let v_n: Vec<f64> = (0..spec.n_buses()).map(|k| z[self.off_vn() + k]).collect();
        let mut v_gen: Vec<f64> = spec.graph().gen_bus().iter().map(|&b| v_n[b]).collect();
        let mut i_g = vec![0.0; spec.n_gens()];
        for (a, &i) in self.active.iter().enumerate() {
            v_gen[i] = z[a];
            i_g[i] = z[self.off_ig() + a];
        }
        let i_e = (0..spec.n_lines()).map(|j| z[self.off_ie() + j]).collect();
        let low = v_n.iter().any(|&v| v < LOW_VOLTAGE_FRACTION * spec.v_nom());
        EquilibriumPoint {
            v_gen,
            i_g,
            i_e,
            v_n,
            lambda_opt: self.secondary().then(|| z[self.idx_lambda()]),
            residual_norm,
            iterations,
            active: self.active_mask.to_vec(),
            low_voltage_branch: low,
        }
    }

    fn solve(&self) -> Result<EquilibriumPoint, DispatchError> {
        let mut z = self.initial_guess()?;
        let mut res = self.residual(&z);
        let mut norm = inf_norm(res.as_slice());
        let mut iterations = 0;
        while norm >= RESIDUAL_TOL {
            if iterations == MAX_ITERATIONS {
                return Err(DispatchError::NoEquilibrium {
                    iterations,
                    residual: norm,
                    last: Box::new(self.point(&z, norm, iterations)),
                });
            }
            let step = solve(self.jacobian(&z), &(-&res))
                .ok_or(DispatchError::SingularJacobian { iteration: iterations })?;
            let mut scale = 1.0;
            let mut accepted = None;
            let mut floor_hit = None;
            for _ in 0..=MAX_HALVINGS {
                let trial = &z + &step * scale;
                if let Some(hit) = self.floor_violation(&trial) {
                    floor_hit = Some(hit);
                } else {
                    let r = self.residual(&trial);
                    let n = inf_norm(r.as_slice());
                    if n < norm {
                        accepted = Some((trial, r, n));
                        break;
                    }
                }
                scale *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some((trial, r, n)) => {
                    z = trial;
                    res = r;
                    norm = n;
                }
                // Stagnation at round-off level counts as converged.
                None if norm < 1e-10 => break,
                None => {
                    if let Some((bus, voltage)) = floor_hit {
                        return Err(DispatchError::Infeasible { bus, voltage });
                    }
                    return Err(DispatchError::NoEquilibrium {
                        iterations,
                        residual: norm,
                        last: Box::new(self.point(&z, norm, iterations)),
                    });
                }
            }
        }
        Ok(self.point(&z, norm, iterations))
    }
}

/// Equilibrium input and the one-parameter family of controller states that
/// sustain it.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumControl {
    /// `u_bar_i = V_bar_i - V_nom + R_D,i I_bar_i` (zero for inactive generators).
    pub u_bar: Vec<f64>,
    /// Member of the family with `sum_active x_i / k_I,i = 0`.
    pub xc_particular: Vec<f64>,
    /// Gauge direction: ones on active generators.
    pub xc_direction: Vec<f64>,
}

impl EquilibriumControl {
    /// `sum_active x_i / k_I,i`, conserved by the consensus dynamics.
    pub fn invariant(gens: &[GeneratorSpec], x_c: &[f64], active: &[bool]) -> f64 {
        gens.iter()
            .zip(x_c)
            .zip(active)
            .filter(|(_, &on)| on)
            .map(|((g, &x), _)| x / g.k_i)
            .sum()
    }

    /// Family member that shares `current`'s invariant; inactive entries are
    /// copied from `current`.
    pub fn matching(&self, gens: &[GeneratorSpec], current: &[f64], active: &[bool]) -> Vec<f64> {
        let s = Self::invariant(gens, current, active);
        let weight: f64 = gens.iter().zip(active).filter(|(_, &on)| on).map(|(g, _)| 1.0 / g.k_i).sum();
        let kappa = s / weight;
        (0..gens.len())
            .map(|i| if active[i] { self.xc_particular[i] + kappa * self.xc_direction[i] } else { current[i] })
            .collect()
    }
}

/// Recovers the equilibrium control and controller state for `eq` under the
/// consensus law on `net`.
pub fn equilibrium_control(
    spec: &MicrogridSpec,
    cfg: &ControllerConfig,
    net: &ConsensusNetwork,
    eq: &EquilibriumPoint,
) -> Result<EquilibriumControl, DispatchError> {
    if !net.is_connected() {
        return Err(DispatchError::Disconnected);
    }
    let gens = spec.gens();
    let n = gens.len();
    let active = net.active();
    let lap = net.laplacian();
    let lambdas = DVector::from_vec(eq.lambdas(gens));
    let z_lambda = -(&lap * &lambdas);

    let mut u_bar = vec![0.0; n];
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let g = gens[i];
        u_bar[i] = eq.v_gen[i] - spec.v_nom() + g.droop * eq.i_g[i];
        rhs[i] = (u_bar[i] - g.droop * eq.i_g[i]) / (2.0 * g.alpha) - cfg.k_p * z_lambda[i];
    }

    // L x = rhs is solvable only if 1' rhs = 0.
    let mismatch: f64 = rhs.iter().sum();
    let scale: f64 = 1.0 + rhs.iter().map(|x| x.abs()).sum::<f64>();
    if mismatch.abs() > 1e-8 * scale {
        return Err(DispatchError::InconsistentEquilibrium { mismatch });
    }

    // (L + 1 c') x = rhs with c = 1/k_I fixes sum x/k_I = 0 on the active set.
    let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let m = idx.len();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (p, &i) in idx.iter().enumerate() {
        b[p] = rhs[i];
        for (q, &j) in idx.iter().enumerate() {
            a[(p, q)] = lap[(i, j)] + 1.0 / gens[j].k_i;
        }
    }
    let x = solve(a, &b).ok_or(DispatchError::Disconnected)?;
    let mut xc_particular = vec![0.0; n];
    let mut xc_direction = vec![0.0; n];
    for (p, &i) in idx.iter().enumerate() {
        xc_particular[i] = x[p];
        xc_direction[i] = 1.0;
    }
    Ok(EquilibriumControl { u_bar, xc_particular, xc_direction })
}
