//! Closed-loop storage function and its dissipation rate about a fixed
//! equilibrium:
//!
//! ```text
//! H_t  = H(x - x_bar) + 1/2 sum_i (x_c,i - x_bar_c,i)^2 / k_I,i
//! dH_t = -grad H(x~)' T grad H(x~)
//! T    = blockdiag(R_G + k_P (2 alpha) L (2 alpha), R_E, G - P / (V_bar V))
//! ```
//!
//! With the secondary layer off the generator block is `R_G + R_D` and the
//! controller term is absent.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::control::{ConsensusNetwork, ControllerConfig};
use crate::dispatch::EquilibriumPoint;
use crate::linalg::min_symmetric_eigenvalue;
use crate::model::{domain_margin, hamiltonian, LoadMask, MicrogridSpec, PhysicalState};

use super::trajectory::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovSample {
    pub h_t: f64,
    pub dh_t: f64,
    /// `dh_t` divided by the equilibrium stored energy.
    pub dh_t_scaled: f64,
    pub t_min_eig: f64,
    pub min_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovMonitor {
    eq: PhysicalState,
    xc_bar: Vec<f64>,
    active: Vec<bool>,
    secondary: bool,
    /// Generator block of `T`, full size; rows of unplugged generators are zero.
    gen_block: DMatrix<f64>,
    gen_block_min_eig: f64,
    /// `(G, P, V_bar)` per bus under the segment's masks.
    buses: Vec<(f64, f64, f64)>,
    line_min_r: f64,
    energy_scale: f64,
}

impl LyapunovMonitor {
    /// `xc_bar` must be the equilibrium controller state that shares the
    /// conserved sum `sum x_c / k_I` with the trajectory being monitored.
    pub fn new(
        spec: &MicrogridSpec,
        cfg: &ControllerConfig,
        net: &ConsensusNetwork,
        loads: &LoadMask,
        eq: &EquilibriumPoint,
        xc_bar: Vec<f64>,
        secondary: bool,
    ) -> Self {
        let ng = spec.n_gens();
        let active = eq.active.clone();
        let mut gen_block = DMatrix::zeros(ng, ng);
        if secondary {
            let lap = net.laplacian();
            for i in 0..ng {
                for j in 0..ng {
                    let two_ai = 2.0 * spec.gens()[i].alpha;
                    let two_aj = 2.0 * spec.gens()[j].alpha;
                    gen_block[(i, j)] = cfg.k_p * two_ai * lap[(i, j)] * two_aj;
                }
            }
        }
        for (i, g) in spec.gens().iter().enumerate() {
            if active[i] {
                gen_block[(i, i)] += g.resistance + if secondary { 0.0 } else { g.droop };
            }
        }
        let idx: Vec<usize> = (0..ng).filter(|&i| active[i]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| gen_block[(idx[a], idx[b])]);
        let gen_block_min_eig = min_symmetric_eigenvalue(&sub);

        let buses = (0..spec.n_buses())
            .map(|k| {
                let b = spec.buses()[k];
                let m = loads.get(k);
                (
                    if m.z { b.conductance } else { 0.0 },
                    if m.p { b.power } else { 0.0 },
                    eq.v_n[k],
                )
            })
            .collect();
        let line_min_r = spec.lines().iter().map(|l| l.resistance).fold(f64::INFINITY, f64::min);
        let eq_state = eq.physical_state(spec);
        let energy = hamiltonian(spec, &eq_state);
        Self {
            eq: eq_state,
            xc_bar,
            active,
            secondary,
            gen_block,
            gen_block_min_eig,
            buses,
            line_min_r,
            energy_scale: if energy > 0.0 { energy } else { 1.0 },
        }
    }

    pub fn energy_scale(&self) -> f64 {
        self.energy_scale
    }

    pub fn evaluate(&self, spec: &MicrogridSpec, phys: &PhysicalState, x_c: &[f64]) -> LyapunovSample {
        self.evaluate_slices(spec, &phys.phi_g, &phys.phi_e, &phys.q_n, x_c)
    }

    pub(crate) fn evaluate_slices(
        &self,
        spec: &MicrogridSpec,
        phi_g: &[f64],
        phi_e: &[f64],
        q_n: &[f64],
        x_c: &[f64],
    ) -> LyapunovSample {
        let ng = spec.n_gens();
        let gens = spec.gens();
        let di = |i: usize| {
            if self.active[i] {
                (phi_g[i] - self.eq.phi_g[i]) / gens[i].inductance
            } else {
                0.0
            }
        };
        let mut h = 0.0;
        let mut dh = 0.0;
        for i in 0..ng {
            let d_i = di(i);
            if d_i == 0.0 {
                continue;
            }
            h += 0.5 * gens[i].inductance * d_i * d_i;
            let row: f64 = (0..ng).map(|j| self.gen_block[(i, j)] * di(j)).sum();
            dh -= d_i * row;
        }
        if self.secondary {
            for (i, g) in spec.gens().iter().enumerate() {
                if self.active[i] {
                    let dx = x_c[i] - self.xc_bar[i];
                    h += 0.5 * dx * dx / g.k_i;
                }
            }
        }
        for (j, l) in spec.lines().iter().enumerate() {
            let dphi = phi_e[j] - self.eq.phi_e[j];
            let di = dphi / l.inductance;
            h += 0.5 * dphi * di;
            dh -= l.resistance * di * di;
        }
        let mut min_margin = f64::INFINITY;
        for (k, b) in spec.buses().iter().enumerate() {
            let (g, p, v_bar) = self.buses[k];
            let dq = q_n[k] - self.eq.q_n[k];
            let dv = dq / b.capacitance;
            let v = q_n[k] / b.capacitance;
            let margin = domain_margin(g, p, v_bar, v);
            h += 0.5 * dq * dv;
            dh -= margin * dv * dv;
            min_margin = min_margin.min(margin);
        }
        LyapunovSample {
            h_t: h,
            dh_t: dh,
            dh_t_scaled: dh / self.energy_scale,
            t_min_eig: self.gen_block_min_eig.min(self.line_min_r).min(min_margin),
            min_margin,
        }
    }
}

/// Per-segment summary of the monitor on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovStats {
    pub steps: u64,
    pub h_t_start: f64,
    pub h_t_end: f64,
    pub energy_scale: f64,
    /// Largest scaled `dH_t` seen.
    pub max_dh_t_scaled: f64,
    pub min_t_eig: f64,
    pub min_margin: f64,
    /// Every step stayed strictly inside the passivity domain.
    pub inside_domain: bool,
    /// Steps where `H_t` rose by more than the tolerance.
    pub monotone_violations: u64,
    pub max_increase: f64,
    pub monotone_tolerance: f64,
    /// RMS of (central difference of H_t - analytic dH_t) over the RMS of
    /// dH_t, floored at `1e-9 * energy_scale`.
    pub fd_rms_rel: f64,
}

/// Streaming accumulator for [`LyapunovStats`].
#[derive(Debug, Clone)]
pub(crate) struct LyapunovTracker {
    stats: LyapunovStats,
    /// Last two `(t, H_t, dH_t)` triples.
    prev: Option<(f64, f64, f64)>,
    prev2: Option<(f64, f64, f64)>,
    fd_err2: f64,
    fd_ref2: f64,
    fd_count: u64,
}

impl LyapunovTracker {
    pub(crate) fn new(t0: f64, first: &LyapunovSample, energy_scale: f64, h: f64) -> Self {
        let stats = LyapunovStats {
            steps: 0,
            h_t_start: first.h_t,
            h_t_end: first.h_t,
            energy_scale,
            max_dh_t_scaled: first.dh_t_scaled,
            min_t_eig: first.t_min_eig,
            min_margin: first.min_margin,
            inside_domain: first.min_margin > 0.0,
            monotone_violations: 0,
            max_increase: 0.0,
            monotone_tolerance: h * h * first.h_t,
            fd_rms_rel: 0.0,
        };
        Self { stats, prev: Some((t0, first.h_t, first.dh_t)), prev2: None, fd_err2: 0.0, fd_ref2: 0.0, fd_count: 0 }
    }

    pub(crate) fn push(&mut self, t: f64, s: &LyapunovSample) {
        let st = &mut self.stats;
        st.steps += 1;
        st.h_t_end = s.h_t;
        st.max_dh_t_scaled = st.max_dh_t_scaled.max(s.dh_t_scaled);
        st.min_t_eig = st.min_t_eig.min(s.t_min_eig);
        st.min_margin = st.min_margin.min(s.min_margin);
        st.inside_domain &= s.min_margin > 0.0;
        if let Some((_, h_prev, _)) = self.prev {
            // The first step after an event aligns the trajectory to the grid.
            if st.steps > 1 {
                let rise = s.h_t - h_prev;
                // Round-off floor on top of the O(h^2) allowance.
                let tol = st.monotone_tolerance + 1e-13 * h_prev.abs() + 1e-18 * st.energy_scale;
                if rise > tol {
                    st.monotone_violations += 1;
                }
                st.max_increase = st.max_increase.max(rise);
            }
        }
        if let (Some((_, _, dh_mid)), Some((t_back, h_back, _))) = (self.prev, self.prev2) {
            let fd = (s.h_t - h_back) / (t - t_back);
            self.fd_err2 += (fd - dh_mid) * (fd - dh_mid);
            self.fd_ref2 += dh_mid * dh_mid;
            self.fd_count += 1;
        }
        self.prev2 = self.prev;
        self.prev = Some((t, s.h_t, s.dh_t));
    }

    pub(crate) fn finish(mut self) -> LyapunovStats {
        // A segment that sits at its equilibrium has dH_t ~ 0; measure the
        // mismatch against a round-off floor instead.
        let n = self.fd_count.max(1) as f64;
        let floor = 1e-9 * self.stats.energy_scale;
        let reference = libm::sqrt(self.fd_ref2 / n).max(floor);
        self.stats.fd_rms_rel = libm::sqrt(self.fd_err2 / n) / reference;
        self.stats
    }
}

/// Re-evaluates the monitor on recorded samples of one fixed-mask segment.
pub fn monitor_lyapunov(spec: &MicrogridSpec, monitor: &LyapunovMonitor, samples: &[Sample]) -> Vec<LyapunovSample> {
    samples
        .iter()
        .map(|s| {
            let phys = PhysicalState::from_electrical(spec, &s.i_g, &s.i_e, &s.v_n);
            monitor.evaluate(spec, &phys, &s.x_c)
        })
        .collect()
}
