use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::control::{AgentOutput, Broadcast, ConsensusNetwork, ControllerConfig, NeighborMessage};
use crate::dispatch::{
    equilibrium_control, solve_closed_loop_equilibrium, solve_droop_equilibrium, spread,
    weighted_average_voltage_among, DispatchError, EquilibriumPoint,
};
use crate::model::{hamiltonian, LoadMask, MicrogridSpec, ModelError};

use super::monitor::{LyapunovMonitor, LyapunovSample, LyapunovTracker};
use super::scenario::{EventKind, Scenario};
use super::trajectory::{EventRecord, EventStatus, RunStats, Sample, Segment, Trajectory};
use super::{apply_event, Integrator, IntegratorSettings, SimError, Simulation, SystemState};

/// Two instants closer than this are the same breakpoint.
const TIME_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 10;
const NEWTON_RTOL: f64 = 1e-10;

/// Reusable buffers for one right-hand-side evaluation.
#[derive(Debug, Clone, Default)]
struct Scratch {
    currents: Vec<f64>,
    broadcast: Vec<Broadcast>,
    outputs: Vec<AgentOutput>,
    messages: Vec<NeighborMessage>,
    u: Vec<f64>,
}

/// Everything the right-hand side needs that stays fixed between events.
struct Frame<'a> {
    spec: &'a MicrogridSpec,
    cfg: &'a ControllerConfig,
    net: &'a ConsensusNetwork,
    loads: &'a LoadMask,
    active: &'a [bool],
    enabled: bool,
    held: Option<&'a [Broadcast]>,
}

impl Frame<'_> {
    fn eval(&self, y: &[f64], dy: &mut [f64], s: &mut Scratch) -> Result<(), ModelError> {
        let spec = self.spec;
        let (ng, ne, nn) = (spec.n_gens(), spec.n_lines(), spec.n_buses());
        let (phi_g, rest) = y.split_at(ng);
        let (phi_e, rest) = rest.split_at(ne);
        let (q_n, x_c) = rest.split_at(nn);
        for i in 0..ng {
            s.currents[i] = if self.active[i] { phi_g[i] / spec.gens()[i].inductance } else { 0.0 };
        }
        let (d_phys, d_xc) = dy.split_at_mut(ng + ne + nn);
        if self.enabled {
            self.net.broadcasts(spec.gens(), x_c, &s.currents, &mut s.broadcast);
            let table = self.held.unwrap_or(&s.broadcast);
            self.net.evaluate(self.cfg, spec.gens(), x_c, &s.currents, table, &mut s.outputs, &mut s.messages);
            for i in 0..ng {
                s.u[i] = s.outputs[i].u;
                d_xc[i] = s.outputs[i].dx_c;
            }
        } else {
            s.u.iter_mut().for_each(|u| *u = 0.0);
            d_xc.iter_mut().for_each(|d| *d = 0.0);
            s.outputs.iter_mut().for_each(|o| *o = AgentOutput { u: 0.0, dx_c: 0.0, z_lambda: 0.0, z_c: 0.0 });
        }
        let (d_phi_g, rest) = d_phys.split_at_mut(ng);
        let (d_phi_e, d_q_n) = rest.split_at_mut(ne);
        spec.rhs_into(phi_g, phi_e, q_n, &s.u, self.loads, self.active, d_phi_g, d_phi_e, d_q_n)
    }

    /// `max_i |V_i - V_nom - 2 alpha_i (k_P z_i^lambda - z_i^c)|` for the
    /// outputs left in `s` by the last evaluation.
    fn droop_identity_error(&self, s: &Scratch) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for (i, g) in self.spec.gens().iter().enumerate() {
            if !self.active[i] {
                continue;
            }
            let v = self.spec.v_nom() - g.droop * s.currents[i] + s.u[i];
            let o = s.outputs[i];
            let formed = self.spec.v_nom() + 2.0 * g.alpha * (self.cfg.k_p * o.z_lambda - o.z_c);
            worst = worst.max((v - formed).abs());
        }
        worst
    }
}

struct OpenSegment {
    t_start: f64,
    first_sample: usize,
    equilibrium: Option<EquilibriumPoint>,
    oracle_error: Option<DispatchError>,
    monitor: Option<LyapunovMonitor>,
    tracker: Option<LyapunovTracker>,
    last: Option<LyapunovSample>,
}

pub(crate) struct Runner<'a> {
    sim: &'a Simulation,
    settings: IntegratorSettings,
    spec: MicrogridSpec,
    state: SystemState,
    y: Vec<f64>,
    net: ConsensusNetwork,
    held: Option<Vec<Broadcast>>,
    scratch: Scratch,
    work: Vec<Vec<f64>>,
    /// Cached `(h, LU(I - h/2 J))` for the implicit method.
    jac: Option<(f64, LU<f64, Dyn, Dyn>)>,
    samples: Vec<Sample>,
    events: Vec<EventRecord>,
    segments: Vec<Segment>,
    stats: RunStats,
    seg: Option<OpenSegment>,
}

impl<'a> Runner<'a> {
    pub(crate) fn new(sim: &'a Simulation, state: SystemState) -> Result<Self, SimError> {
        let spec = sim.spec().clone();
        let (ng, nn) = (spec.n_gens(), spec.n_buses());
        let dims_ok = state.phys.phi_g.len() == ng
            && state.phys.phi_e.len() == spec.n_lines()
            && state.phys.q_n.len() == nn
            && state.ctrl.x_c.len() == ng
            && state.ctrl.active.len() == ng
            && state.loads.len() == nn
            && state.v_sync.len() == ng
            && state.link_on.len() == sim.cfg().comm.links().len();
        if !dims_ok {
            return Err(SimError::InvalidSettings("initial state dimensions do not match the microgrid"));
        }
        let n = spec.n_states() + ng;
        let scratch = Scratch {
            currents: vec![0.0; ng],
            broadcast: Vec::with_capacity(ng),
            outputs: vec![AgentOutput { u: 0.0, dx_c: 0.0, z_lambda: 0.0, z_c: 0.0 }; ng],
            messages: Vec::with_capacity(ng),
            u: vec![0.0; ng],
        };
        let net = state.network(sim.cfg());
        let mut runner = Self {
            sim,
            settings: *sim.settings(),
            spec,
            y: vec![0.0; n],
            net,
            held: None,
            scratch,
            work: vec![vec![0.0; n]; 6],
            jac: None,
            samples: Vec::new(),
            events: Vec::new(),
            segments: Vec::new(),
            stats: RunStats::default(),
            seg: None,
            state,
        };
        runner.load_state();
        Ok(runner)
    }

    fn cfg(&self) -> &'a ControllerConfig {
        self.sim.live_cfg()
    }

    fn load_state(&mut self) {
        let p = &self.state.phys;
        let y = &mut self.y;
        for (k, v) in p.phi_g.iter().chain(&p.phi_e).chain(&p.q_n).chain(&self.state.ctrl.x_c).enumerate() {
            y[k] = *v;
        }
    }

    fn store_state(&mut self) {
        let (ng, ne, nn) = (self.spec.n_gens(), self.spec.n_lines(), self.spec.n_buses());
        let y = &self.y;
        self.state.phys.phi_g.copy_from_slice(&y[..ng]);
        self.state.phys.phi_e.copy_from_slice(&y[ng..ng + ne]);
        self.state.phys.q_n.copy_from_slice(&y[ng + ne..ng + ne + nn]);
        self.state.ctrl.x_c.copy_from_slice(&y[ng + ne + nn..]);
    }

    fn frame(&self) -> Frame<'_> {
        Frame {
            spec: &self.spec,
            cfg: self.sim.live_cfg(),
            net: &self.net,
            loads: &self.state.loads,
            active: &self.state.ctrl.active,
            enabled: self.state.secondary_enabled,
            held: self.held.as_deref(),
        }
    }

    fn refresh_held(&mut self) {
        if self.cfg().sample_period.is_none() {
            return;
        }
        let ng = self.spec.n_gens();
        let (ne, nn) = (self.spec.n_lines(), self.spec.n_buses());
        let x_c = &self.y[ng + ne + nn..];
        let currents: Vec<f64> = (0..ng)
            .map(|i| if self.state.ctrl.active[i] { self.y[i] / self.spec.gens()[i].inductance } else { 0.0 })
            .collect();
        let mut table = Vec::with_capacity(ng);
        self.net.broadcasts(self.spec.gens(), x_c, &currents, &mut table);
        self.held = Some(table);
    }

    pub(crate) fn run(mut self, scenario: &Scenario) -> Result<Trajectory, SimError> {
        let t0 = self.state.t;
        if (t0 - scenario.t_start).abs() > TIME_TOL {
            return Err(SimError::InvalidSettings("initial state time differs from the scenario start"));
        }
        let horizon = scenario.horizon;
        let events = &scenario.events;
        let mut next_event = 0;
        while next_event < events.len() && events[next_event].time <= t0 + TIME_TOL {
            self.apply_scheduled(next_event, &events[next_event].kind, events[next_event].time)?;
            next_event += 1;
        }
        self.refresh_held();
        self.open_segment();
        self.record()?;

        let rec = self.settings.record_interval;
        let mut rec_k: u64 = 1;
        let period = self.cfg().sample_period;
        let mut ctrl_k: u64 = 1;
        let mut t = t0;
        while t < horizon - TIME_TOL {
            let t_rec = t0 + rec_k as f64 * rec;
            let t_ev = events.get(next_event).map_or(f64::INFINITY, |e| e.time);
            let t_ctrl = period.map_or(f64::INFINITY, |p| t0 + ctrl_k as f64 * p);
            let target = t_rec.min(t_ev).min(t_ctrl).min(horizon);
            self.advance(t, target)?;
            t = target;
            self.state.t = t;

            let at_event = t_ev <= target + TIME_TOL;
            let at_rec = t_rec <= target + TIME_TOL;
            let mut closed = false;
            if at_event {
                t = t_ev;
                self.state.t = t;
                self.close_segment();
                closed = true;
                while next_event < events.len() && events[next_event].time <= t + TIME_TOL {
                    let ev = &events[next_event];
                    self.apply_scheduled(next_event, &ev.kind, ev.time)?;
                    next_event += 1;
                }
            }
            if at_rec && !self.state.pending_replug.is_empty() {
                closed |= self.retry_replugs(closed)?;
            }
            if closed {
                self.net = self.state.network(self.cfg());
                self.jac = None;
                self.refresh_held();
                self.open_segment();
            }
            if period.is_some() && t_ctrl <= target + TIME_TOL {
                self.refresh_held();
                ctrl_k += 1;
            }
            if at_rec || closed || t >= horizon - TIME_TOL {
                self.record()?;
            }
            if at_rec {
                rec_k += 1;
            }
        }
        self.store_state();
        self.close_segment();
        Ok(Trajectory {
            samples: self.samples,
            events: self.events,
            segments: self.segments,
            final_state: self.state,
            stats: self.stats,
        })
    }

    fn apply_scheduled(&mut self, index: usize, kind: &EventKind, scheduled: f64) -> Result<(), SimError> {
        self.store_state();
        let status = apply_event(&mut self.spec, self.sim.cfg(), &mut self.state, kind, self.settings.v_sync_tol)
            .map_err(|e| match e {
                SimError::InvalidEvent { time, reason, .. } => SimError::InvalidEvent { index, time, reason },
                other => other,
            })?;
        let note = match &status {
            EventStatus::Applied => String::new(),
            EventStatus::Deferred { mismatch } => {
                if let EventKind::ReplugGen(i) = kind {
                    if !self.state.pending_replug.contains(i) {
                        self.state.pending_replug.push(*i);
                    }
                }
                format!("breaker sides differ by {mismatch:.3e} V; retrying at the next sample")
            }
        };
        self.events.push(EventRecord { t: self.state.t, scheduled, kind: kind.clone(), status, note });
        self.load_state();
        self.net = self.state.network(self.sim.cfg());
        Ok(())
    }

    /// Returns true if any pending replug went through.
    fn retry_replugs(&mut self, already_closed: bool) -> Result<bool, SimError> {
        self.store_state();
        let pending = core::mem::take(&mut self.state.pending_replug);
        let mut any = false;
        for i in pending {
            let kind = EventKind::ReplugGen(i);
            let status = apply_event(&mut self.spec, self.sim.cfg(), &mut self.state, &kind, self.settings.v_sync_tol)?;
            if status == EventStatus::Applied {
                if !any && !already_closed {
                    self.close_segment();
                }
                any = true;
                let scheduled = self
                    .events
                    .iter()
                    .rev()
                    .find(|e| e.kind == kind)
                    .map_or(self.state.t, |e| e.scheduled);
                self.events.push(EventRecord {
                    t: self.state.t,
                    scheduled,
                    kind,
                    status,
                    note: String::from("deferred replug applied"),
                });
            } else {
                self.state.pending_replug.push(i);
            }
        }
        self.load_state();
        Ok(any)
    }

    fn open_segment(&mut self) {
        self.store_state();
        let t_start = self.state.t;
        let first_sample = self.samples.len();
        let mut seg = OpenSegment {
            t_start,
            first_sample,
            equilibrium: None,
            oracle_error: None,
            monitor: None,
            tracker: None,
            last: None,
        };
        if self.settings.monitor {
            match self.segment_oracle() {
                Ok((eq, monitor)) => {
                    if let Some(m) = monitor {
                        let ng = self.spec.n_gens();
                        let off = self.y.len() - ng;
                        let (phys, x_c) = self.y.split_at(off);
                        let (phi_g, rest) = phys.split_at(ng);
                        let (phi_e, q_n) = rest.split_at(self.spec.n_lines());
                        let first = m.evaluate_slices(&self.spec, phi_g, phi_e, q_n, x_c);
                        seg.tracker = Some(LyapunovTracker::new(t_start, &first, m.energy_scale(), self.settings.h));
                        seg.last = Some(first);
                        seg.monitor = Some(m);
                    }
                    seg.equilibrium = Some(eq);
                }
                Err(e) => seg.oracle_error = Some(e),
            }
        }
        self.seg = Some(seg);
    }

    fn segment_oracle(&self) -> Result<(EquilibriumPoint, Option<LyapunovMonitor>), DispatchError> {
        let spec = &self.spec;
        let cfg = self.cfg();
        let st = &self.state;
        let active = st.gen_active();
        let continuous = cfg.sample_period.is_none();
        if st.secondary_enabled {
            if !self.net.is_connected() {
                return Err(DispatchError::Disconnected);
            }
            let eq = solve_closed_loop_equilibrium(spec, cfg, &st.loads, active)?;
            let ctrl = equilibrium_control(spec, cfg, &self.net, &eq)?;
            let xc_bar = ctrl.matching(spec.gens(), &st.ctrl.x_c, active);
            let mon = continuous.then(|| LyapunovMonitor::new(spec, cfg, &self.net, &st.loads, &eq, xc_bar, true));
            Ok((eq, mon))
        } else {
            let zeros = vec![0.0; spec.n_gens()];
            let eq = solve_droop_equilibrium(spec, &st.loads, active, &zeros)?;
            let mon = LyapunovMonitor::new(spec, cfg, &self.net, &st.loads, &eq, st.ctrl.x_c.clone(), false);
            Ok((eq, Some(mon)))
        }
    }

    fn close_segment(&mut self) {
        let Some(seg) = self.seg.take() else { return };
        self.store_state();
        self.segments.push(Segment {
            t_start: seg.t_start,
            t_end: self.state.t,
            secondary_enabled: self.state.secondary_enabled,
            active: self.state.ctrl.active.clone(),
            loads: self.state.loads.clone(),
            first_sample: seg.first_sample,
            end_sample: self.samples.len(),
            end_state: self.state.clone(),
            equilibrium: seg.equilibrium,
            oracle_error: seg.oracle_error,
            lyapunov: seg.tracker.map(LyapunovTracker::finish),
        });
    }

    fn record(&mut self) -> Result<(), SimError> {
        self.store_state();
        let spec = &self.spec;
        let ng = spec.n_gens();
        let mut dy = core::mem::take(&mut self.work[5]);
        let t = self.state.t;
        let mut scratch = core::mem::take(&mut self.scratch);
        self.frame().eval(&self.y, &mut dy, &mut scratch).map_err(|e| self.model_err(e, t))?;
        self.work[5] = dy;
        let active = &self.state.ctrl.active;
        let i_g: Vec<f64> = scratch.currents.clone();
        let v_gen: Vec<f64> = (0..ng)
            .map(|i| {
                if active[i] {
                    spec.v_nom() - spec.gens()[i].droop * i_g[i] + scratch.u[i]
                } else {
                    self.state.v_sync[i]
                }
            })
            .collect();
        let lambda: Vec<f64> =
            spec.gens().iter().zip(&i_g).map(|(g, &i)| crate::control::incremental_cost(g, i)).collect();
        let active_lambda: Vec<f64> = (0..ng).filter(|&i| active[i]).map(|i| lambda[i]).collect();
        let (h_t, dh_t, min_margin) = match self.seg.as_ref().and_then(|s| s.last) {
            Some(l) => (l.h_t, l.dh_t, l.min_margin),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let sample = Sample {
            t,
            wavg_v: weighted_average_voltage_among(spec.gens(), &v_gen, active),
            lambda_spread: spread(&active_lambda),
            h: hamiltonian(spec, &self.state.phys),
            v_gen,
            i_g,
            i_e: self.state.phys.line_currents(spec),
            v_n: self.state.phys.bus_voltages(spec),
            lambda,
            x_c: self.state.ctrl.x_c.clone(),
            u: scratch.u.clone(),
            h_t,
            dh_t,
            min_margin,
        };
        self.samples.push(sample);
        self.scratch = scratch;
        Ok(())
    }

    fn model_err(&self, e: ModelError, t: f64) -> SimError {
        match e {
            ModelError::CplSingularity { bus, voltage } => SimError::CplSingularity { t, bus, voltage },
            other => SimError::Model(other),
        }
    }

    /// Integrates from `t` to `target` on a uniform grid.
    fn advance(&mut self, t: f64, target: f64) -> Result<(), SimError> {
        let span = target - t;
        if span <= 0.0 {
            return Ok(());
        }
        let n = libm::ceil(span / self.settings.h - 1e-6).max(1.0) as u64;
        let h = span / n as f64;
        for k in 0..n {
            let t_k = t + k as f64 * h;
            match self.settings.integrator {
                Integrator::Rk4 => self.rk4_step(t_k, h)?,
                Integrator::Trapezoidal => self.trapezoidal_step(t_k, h)?,
            }
            let t_next = if k + 1 == n { target } else { t + (k + 1) as f64 * h };
            self.after_step(t_next, h)?;
        }
        Ok(())
    }

    fn after_step(&mut self, t: f64, h: f64) -> Result<(), SimError> {
        self.stats.steps += 1;
        let limit = self.settings.divergence_limit;
        if self.y.iter().any(|v| !v.is_finite() || v.abs() > limit) {
            return Err(SimError::Diverged { t, last: self.samples.last().cloned().map(Box::new) });
        }
        let spec = &self.spec;
        let decay = libm::exp(-h / self.settings.sync_time_constant);
        let off_q = spec.n_gens() + spec.n_lines();
        for i in 0..spec.n_gens() {
            if !self.state.ctrl.active[i] {
                let bus = spec.graph().gen_bus()[i];
                let v_bus = self.y[off_q + bus] / spec.buses()[bus].capacitance;
                self.state.v_sync[i] = v_bus + (self.state.v_sync[i] - v_bus) * decay;
            }
        }
        if let Some(seg) = self.seg.as_mut() {
            if let (Some(m), Some(tr)) = (seg.monitor.as_ref(), seg.tracker.as_mut()) {
                let ng = spec.n_gens();
                let off = self.y.len() - ng;
                let (phys, x_c) = self.y.split_at(off);
                let (phi_g, rest) = phys.split_at(ng);
                let (phi_e, q_n) = rest.split_at(spec.n_lines());
                let s = m.evaluate_slices(spec, phi_g, phi_e, q_n, x_c);
                tr.push(t, &s);
                seg.last = Some(s);
            }
        }
        Ok(())
    }

    fn rk4_step(&mut self, t: f64, h: f64) -> Result<(), SimError> {
        let n = self.y.len();
        let mut w = core::mem::take(&mut self.work);
        let mut s = core::mem::take(&mut self.scratch);
        let res = (|| {
            let frame = self.frame();
            let err = |e| self.model_err(e, t);
            let [k1, k2, k3, k4, tmp, _] = &mut w[..] else { unreachable!() };
            frame.eval(&self.y, k1, &mut s).map_err(err)?;
            let droop_err = frame.droop_identity_error(&s);
            for j in 0..n {
                tmp[j] = self.y[j] + 0.5 * h * k1[j];
            }
            frame.eval(tmp, k2, &mut s).map_err(err)?;
            for j in 0..n {
                tmp[j] = self.y[j] + 0.5 * h * k2[j];
            }
            frame.eval(tmp, k3, &mut s).map_err(err)?;
            for j in 0..n {
                tmp[j] = self.y[j] + h * k3[j];
            }
            frame.eval(tmp, k4, &mut s).map_err(err)?;
            Ok::<f64, SimError>(droop_err)
        })();
        let out = match res {
            Ok(droop_err) => {
                let [k1, k2, k3, k4, ..] = &w[..] else { unreachable!() };
                for j in 0..n {
                    self.y[j] += h / 6.0 * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]);
                }
                self.stats.rhs_evals += 4;
                self.stats.max_droop_identity_error = self.stats.max_droop_identity_error.max(droop_err);
                Ok(())
            }
            Err(e) => Err(e),
        };
        self.work = w;
        self.scratch = s;
        out
    }

    /// Per-component tolerance scale: one ampere of flux, one volt of charge.
    fn error_weight(&self, j: usize, y: f64) -> f64 {
        let spec = &self.spec;
        let (ng, ne, nn) = (spec.n_gens(), spec.n_lines(), spec.n_buses());
        let unit = if j < ng {
            spec.gens()[j].inductance
        } else if j < ng + ne {
            spec.lines()[j - ng].inductance
        } else if j < ng + ne + nn {
            spec.buses()[j - ng - ne].capacitance
        } else {
            1.0
        };
        1e-12 * unit + NEWTON_RTOL * y.abs()
    }

    fn jacobian(&mut self, t: f64) -> Result<DMatrix<f64>, SimError> {
        let n = self.y.len();
        let mut s = core::mem::take(&mut self.scratch);
        let mut f0 = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        let mut yp = self.y.clone();
        let mut jac = DMatrix::zeros(n, n);
        {
            let frame = self.frame();
            frame.eval(&self.y, &mut f0, &mut s).map_err(|e| self.model_err(e, t))?;
            for j in 0..n {
                let unit = self.error_weight(j, 0.0) * 1e12;
                let d = 1.5e-8 * self.y[j].abs().max(unit);
                yp[j] = self.y[j] + d;
                let d = yp[j] - self.y[j];
                frame.eval(&yp, &mut f1, &mut s).map_err(|e| self.model_err(e, t))?;
                for i in 0..n {
                    jac[(i, j)] = (f1[i] - f0[i]) / d;
                }
                yp[j] = self.y[j];
            }
        }
        self.stats.rhs_evals += n as u64 + 1;
        self.stats.jacobian_evals += 1;
        self.scratch = s;
        Ok(jac)
    }

    fn factor(&mut self, t: f64, h: f64) -> Result<(), SimError> {
        let jac = self.jacobian(t)?;
        let n = self.y.len();
        let m = DMatrix::identity(n, n) - jac * (0.5 * h);
        self.jac = Some((h, m.lu()));
        Ok(())
    }

    fn trapezoidal_step(&mut self, t: f64, h: f64) -> Result<(), SimError> {
        if self.try_trapezoidal(t, h)? {
            return Ok(());
        }
        if h / 2.0 < self.settings.h_min {
            return Err(SimError::ImplicitFailure { t, h });
        }
        self.stats.rejected_steps += 1;
        self.trapezoidal_step(t, h / 2.0)?;
        self.trapezoidal_step(t + h / 2.0, h / 2.0)
    }

    /// One trapezoidal step; `Ok(false)` when Newton fails even with a fresh Jacobian.
    fn try_trapezoidal(&mut self, t: f64, h: f64) -> Result<bool, SimError> {
        let fresh_needed = !matches!(&self.jac, Some((hj, _)) if *hj == h);
        if fresh_needed {
            self.factor(t, h)?;
        }
        if self.newton(t, h)? {
            return Ok(true);
        }
        if fresh_needed {
            return Ok(false);
        }
        self.factor(t, h)?;
        self.newton(t, h)
    }

    fn newton(&mut self, t: f64, h: f64) -> Result<bool, SimError> {
        let n = self.y.len();
        let mut s = core::mem::take(&mut self.scratch);
        let mut f0 = vec![0.0; n];
        let mut fz = vec![0.0; n];
        let droop_err;
        {
            let frame = self.frame();
            frame.eval(&self.y, &mut f0, &mut s).map_err(|e| self.model_err(e, t))?;
            droop_err = frame.droop_identity_error(&s);
        }
        self.stats.rhs_evals += 1;
        let mut z: Vec<f64> = (0..n).map(|j| self.y[j] + h * f0[j]).collect();
        let mut prev = f64::INFINITY;
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let ok = self.frame().eval(&z, &mut fz, &mut s).is_ok();
            self.stats.rhs_evals += 1;
            if !ok {
                break;
            }
            let g = DVector::from_fn(n, |j, _| -(z[j] - self.y[j] - 0.5 * h * (f0[j] + fz[j])));
            let Some((_, lu)) = self.jac.as_ref() else { break };
            let Some(delta) = lu.solve(&g) else { break };
            let mut norm: f64 = 0.0;
            for j in 0..n {
                z[j] += delta[j];
                norm = norm.max(delta[j].abs() / self.error_weight(j, z[j]));
            }
            if !norm.is_finite() {
                break;
            }
            if norm <= 1.0 {
                converged = true;
                break;
            }
            if norm > 0.9 * prev && prev.is_finite() {
                break;
            }
            prev = norm;
        }
        self.scratch = s;
        if converged {
            self.y.copy_from_slice(&z);
            self.stats.max_droop_identity_error = self.stats.max_droop_identity_error.max(droop_err);
        }
        Ok(converged)
    }
}
