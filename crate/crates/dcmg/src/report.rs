//! Plain-text summary of a run: one block per fixed-mask segment.

use std::fmt::{self, Write as _};

use dcmg_core::{EquilibriumPoint, MicrogridSpec, Sample, Segment, Trajectory};

use crate::output::describe_event;

/// Largest block-wise relative deviation of a recorded state from an
/// equilibrium, over plugged generator voltages and currents, line currents
/// and bus voltages. Each block is scaled by its own infinity norm.
pub fn state_rel_err(
    eq: &EquilibriumPoint,
    v_gen: &[f64],
    i_g: &[f64],
    i_e: &[f64],
    v_n: &[f64],
) -> f64 {
    let pick = |x: &[f64]| -> Vec<f64> { x.iter().zip(&eq.active).filter(|(_, &on)| on).map(|(v, _)| *v).collect() };
    let block = |a: &[f64], b: &[f64]| {
        let scale = b.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-12);
        a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
    };
    block(&pick(v_gen), &pick(&eq.v_gen))
        .max(block(&pick(i_g), &pick(&eq.i_g)))
        .max(block(i_e, &eq.i_e))
        .max(block(v_n, &eq.v_n))
}

pub fn sample_rel_err(eq: &EquilibriumPoint, s: &Sample) -> f64 {
    state_rel_err(eq, &s.v_gen, &s.i_g, &s.i_e, &s.v_n)
}

/// Last sample recorded inside `seg`.
pub fn last_sample<'a>(traj: &'a Trajectory, seg: &Segment) -> &'a Sample {
    &traj.samples[seg.end_sample.max(seg.first_sample + 1) - 1]
}

/// Mean incremental cost over plugged generators.
pub fn consensus_value(s: &Sample, active: &[bool]) -> f64 {
    let (sum, n) = s.lambda.iter().zip(active).filter(|(_, &on)| on).fold((0.0, 0usize), |(a, n), (l, _)| (a + l, n + 1));
    sum / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSummary {
    pub t_start: f64,
    pub t_end: f64,
    pub secondary: bool,
    pub active: Vec<bool>,
    pub cpl_buses: usize,
    pub end: Sample,
    pub consensus: f64,
    pub oracle_lambda: Option<f64>,
    pub oracle_delta: Option<f64>,
    pub oracle_error: Option<String>,
    pub lyapunov_violations: Option<u64>,
    pub inside_domain: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryReport {
    pub name: String,
    pub v_nom: f64,
    pub segments: Vec<SegmentSummary>,
    pub events: Vec<String>,
    pub steps: u64,
    pub rhs_evals: u64,
    pub wall_seconds: f64,
}

impl SummaryReport {
    pub fn new(name: &str, spec: &MicrogridSpec, traj: &Trajectory, wall_seconds: f64) -> Self {
        let segments = traj
            .segments
            .iter()
            .map(|seg| {
                let end = last_sample(traj, seg).clone();
                SegmentSummary {
                    t_start: seg.t_start,
                    t_end: seg.t_end,
                    secondary: seg.secondary_enabled,
                    active: seg.active.clone(),
                    cpl_buses: (0..seg.loads.len()).filter(|&k| seg.loads.get(k).p && spec.buses()[k].power != 0.0).count(),
                    consensus: consensus_value(&end, &seg.active),
                    oracle_lambda: seg.equilibrium.as_ref().and_then(|e| e.lambda_opt),
                    oracle_delta: seg.equilibrium.as_ref().map(|e| sample_rel_err(e, &end)),
                    oracle_error: seg.oracle_error.as_ref().map(|e| e.to_string()),
                    lyapunov_violations: seg.lyapunov.as_ref().map(|l| l.monotone_violations),
                    inside_domain: seg.lyapunov.as_ref().map(|l| l.inside_domain),
                    end,
                }
            })
            .collect();
        let events = traj
            .events
            .iter()
            .map(|e| {
                let status = match e.status {
                    dcmg_core::sim::EventStatus::Applied => String::from("applied"),
                    dcmg_core::sim::EventStatus::Deferred { mismatch } => format!("deferred ({mismatch:.3e} V apart)"),
                };
                format!("t = {:>9.4} s  {}  [{status}]", e.t, describe_event(&e.kind))
            })
            .collect();
        Self {
            name: name.to_string(),
            v_nom: spec.v_nom(),
            segments,
            events,
            steps: traj.stats.steps,
            rhs_evals: traj.stats.rhs_evals,
            wall_seconds,
        }
    }
}

fn row(out: &mut String, label: &str, values: &[f64], active: &[bool]) {
    let _ = write!(out, "    {label:<8}");
    for (v, on) in values.iter().zip(active) {
        if *on {
            let _ = write!(out, " {v:>11.6}");
        } else {
            let _ = write!(out, " {:>11}", "(off)");
        }
    }
    out.push('\n');
}

impl fmt::Display for SummaryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", if self.name.is_empty() { "(unnamed)" } else { &self.name })?;
        writeln!(f, "steps: {}  rhs evaluations: {}  wall time: {:.2} s", self.steps, self.rhs_evals, self.wall_seconds)?;
        writeln!(f)?;
        writeln!(f, "events:")?;
        for e in &self.events {
            writeln!(f, "  {e}")?;
        }
        for (n, s) in self.segments.iter().enumerate() {
            writeln!(f)?;
            let plugged: Vec<String> =
                s.active.iter().enumerate().filter(|(_, &on)| on).map(|(i, _)| (i + 1).to_string()).collect();
            writeln!(
                f,
                "segment {} [{:.4}, {:.4}] s  secondary {}  generators {}  CPL buses {}",
                n + 1,
                s.t_start,
                s.t_end,
                if s.secondary { "on" } else { "off" },
                plugged.join(","),
                s.cpl_buses
            )?;
            let mut body = String::new();
            let all = vec![true; s.active.len()];
            let header: Vec<String> = (1..=s.active.len()).map(|i| format!("{:>11}", format!("DG{i}"))).collect();
            let _ = writeln!(body, "    {:<8} {}", "", header.join(" "));
            row(&mut body, "V_gen[V]", &s.end.v_gen, &all);
            row(&mut body, "I_G[A]", &s.end.i_g, &s.active);
            row(&mut body, "lambda", &s.end.lambda, &s.active);
            f.write_str(&body)?;
            writeln!(
                f,
                "    lambda spread {:.3e} $/A  consensus {:.7} $/A  weighted average {:.6} V (nominal {} V)",
                s.end.lambda_spread, s.consensus, s.end.wavg_v, self.v_nom
            )?;
            match (&s.oracle_error, s.oracle_delta) {
                (Some(e), _) => writeln!(f, "    oracle: failed ({e})")?,
                (None, Some(d)) => {
                    let lambda = s.oracle_lambda.map_or_else(|| "n/a".into(), |l| format!("{l:.7} $/A"));
                    writeln!(f, "    oracle: lambda_opt {lambda}  relative state deviation at segment end {d:.3e}")?
                }
                _ => writeln!(f, "    oracle: not run")?,
            }
            match (s.lyapunov_violations, s.inside_domain) {
                (Some(v), Some(d)) => writeln!(
                    f,
                    "    Lyapunov: {v} monotonicity violations, {}",
                    if d { "inside the passivity domain" } else { "left the passivity domain" }
                )?,
                _ => writeln!(f, "    Lyapunov: not monitored")?,
            }
        }
        Ok(())
    }
}
