use alloc::string::String;
use alloc::vec::Vec;

use crate::dispatch::{DispatchError, EquilibriumPoint};
use crate::model::LoadMask;

use super::monitor::LyapunovStats;
use super::scenario::EventKind;
use super::SystemState;

/// One recorded row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    /// Terminal voltages. Unplugged generators report their synchronizer voltage.
    pub v_gen: Vec<f64>,
    pub i_g: Vec<f64>,
    pub i_e: Vec<f64>,
    pub v_n: Vec<f64>,
    pub lambda: Vec<f64>,
    pub x_c: Vec<f64>,
    pub u: Vec<f64>,
    /// Weighted average over plugged generators.
    pub wavg_v: f64,
    /// Incremental-cost spread over plugged generators.
    pub lambda_spread: f64,
    /// Stored energy `H(x)`.
    pub h: f64,
    /// Closed-loop storage function about the segment equilibrium; NaN when unavailable.
    pub h_t: f64,
    pub dh_t: f64,
    /// Smallest passivity-domain margin `G - P / (V_bar V)`; NaN when unavailable.
    pub min_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventStatus {
    Applied,
    /// Replug postponed because the breaker sides were not synchronized.
    Deferred { mismatch: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    /// Scheduled time of the originating event.
    pub scheduled: f64,
    pub kind: EventKind,
    pub status: EventStatus,
    pub note: String,
}

/// Interval with fixed masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub secondary_enabled: bool,
    pub active: Vec<bool>,
    pub loads: LoadMask,
    /// Index of the first sample recorded inside the segment.
    pub first_sample: usize,
    /// One past the last sample inside the segment.
    pub end_sample: usize,
    pub end_state: SystemState,
    /// Oracle steady state for the segment's masks, when monitoring is on.
    pub equilibrium: Option<EquilibriumPoint>,
    pub oracle_error: Option<DispatchError>,
    pub lyapunov: Option<LyapunovStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunStats {
    pub steps: u64,
    pub rhs_evals: u64,
    pub jacobian_evals: u64,
    pub rejected_steps: u64,
    /// Largest `|V_i - V_nom - 2 alpha_i (k_P z_i^lambda - z_i^c)|` over all steps
    /// with the secondary layer on.
    pub max_droop_identity_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub events: Vec<EventRecord>,
    pub segments: Vec<Segment>,
    pub final_state: SystemState,
    pub stats: RunStats,
}

impl Trajectory {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Samples with `t` in `[t0, t1]`.
    pub fn window(&self, t0: f64, t1: f64) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.t >= t0 && s.t <= t1)
    }

    /// Column-wise mean of the samples in `[t0, t1]`.
    pub fn mean_over(&self, t0: f64, t1: f64) -> Option<MeanState> {
        let mut n = 0usize;
        let mut acc: Option<MeanState> = None;
        for s in self.window(t0, t1) {
            n += 1;
            match acc.as_mut() {
                None => {
                    acc = Some(MeanState {
                        v_gen: s.v_gen.clone(),
                        i_g: s.i_g.clone(),
                        i_e: s.i_e.clone(),
                        v_n: s.v_n.clone(),
                        lambda: s.lambda.clone(),
                    })
                }
                Some(m) => {
                    add(&mut m.v_gen, &s.v_gen);
                    add(&mut m.i_g, &s.i_g);
                    add(&mut m.i_e, &s.i_e);
                    add(&mut m.v_n, &s.v_n);
                    add(&mut m.lambda, &s.lambda);
                }
            }
        }
        let mut m = acc?;
        let k = 1.0 / n as f64;
        for v in [&mut m.v_gen, &mut m.i_g, &mut m.i_e, &mut m.v_n, &mut m.lambda] {
            v.iter_mut().for_each(|x| *x *= k);
        }
        Some(m)
    }
}

fn add(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Time-averaged electrical quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanState {
    pub v_gen: Vec<f64>,
    pub i_g: Vec<f64>,
    pub i_e: Vec<f64>,
    pub v_n: Vec<f64>,
    pub lambda: Vec<f64>,
}

