//! Trajectory CSV, event-log sidecar and their readers.
//!
//! Numbers are written with 17 significant digits, which round-trips every
//! `f64` exactly. Column names carry their unit in brackets and depend only on
//! the network dimensions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use dcmg_core::sim::{EventRecord, EventStatus};
use dcmg_core::{EventKind, Sample};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("trajectory has no samples")]
    Empty,
}

/// Network dimensions that fix the column set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_gens: usize,
    pub n_lines: usize,
    pub n_buses: usize,
}

impl Dims {
    pub fn of(spec: &dcmg_core::MicrogridSpec) -> Self {
        Self { n_gens: spec.n_gens(), n_lines: spec.n_lines(), n_buses: spec.n_buses() }
    }
}

const CONTROLLER_STATE_UNIT: &str = "V*A^2/$";

pub fn trajectory_header(d: Dims) -> Vec<String> {
    let mut h = vec!["t[s]".to_string()];
    let block = |h: &mut Vec<String>, name: &str, n: usize, unit: &str| {
        h.extend((1..=n).map(|i| format!("{name}_{i}[{unit}]")));
    };
    block(&mut h, "V_gen", d.n_gens, "V");
    block(&mut h, "I_G", d.n_gens, "A");
    block(&mut h, "I_E", d.n_lines, "A");
    block(&mut h, "V_N", d.n_buses, "V");
    block(&mut h, "lambda", d.n_gens, "$/A");
    block(&mut h, "x_c", d.n_gens, CONTROLLER_STATE_UNIT);
    block(&mut h, "u", d.n_gens, "V");
    h.extend(
        ["wavg_V[V]", "lambda_spread[$/A]", "H[J]", "H_t[J]", "dH_t[W]", "min_margin[S]"].map(String::from),
    );
    h
}

fn number(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv { path: path.display().to_string(), source }
}

pub fn emit_csv(samples: &[Sample], dims: Dims, path: &Path) -> Result<(), OutputError> {
    if samples.is_empty() {
        return Err(OutputError::Empty);
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(trajectory_header(dims)).map_err(csv_err(path))?;
    let mut row = Vec::new();
    for s in samples {
        row.clear();
        row.push(number(s.t));
        for block in [&s.v_gen, &s.i_g, &s.i_e, &s.v_n, &s.lambda, &s.x_c, &s.u] {
            row.extend(block.iter().copied().map(number));
        }
        row.extend([s.wavg_v, s.lambda_spread, s.h, s.h_t, s.dh_t, s.min_margin].map(number));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| OutputError::Io { path: path.display().to_string(), source })
}

/// Reads a file written by [`emit_csv`] back into samples.
pub fn read_csv(path: &Path, dims: Dims) -> Result<Vec<Sample>, OutputError> {
    let format = |message: String| OutputError::Format { path: path.display().to_string(), message };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    if header != trajectory_header(dims) {
        return Err(format("header does not match the network dimensions".into()));
    }
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let values = rec
            .iter()
            .enumerate()
            .map(|(c, f)| f.parse::<f64>().map_err(|e| format(format!("row {}, column {}: {e}", n + 2, header[c]))))
            .collect::<Result<Vec<f64>, _>>()?;
        let mut it = values.into_iter();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let t = take(1)[0];
        let (ng, nl, nb) = (dims.n_gens, dims.n_lines, dims.n_buses);
        let v_gen = take(ng);
        let i_g = take(ng);
        let i_e = take(nl);
        let v_n = take(nb);
        let lambda = take(ng);
        let x_c = take(ng);
        let u = take(ng);
        let tail = take(6);
        out.push(Sample {
            t,
            v_gen,
            i_g,
            i_e,
            v_n,
            lambda,
            x_c,
            u,
            wavg_v: tail[0],
            lambda_spread: tail[1],
            h: tail[2],
            h_t: tail[3],
            dh_t: tail[4],
            min_margin: tail[5],
        });
    }
    Ok(out)
}

/// Event text with 1-based entity numbers.
pub fn describe_event(kind: &EventKind) -> String {
    match kind {
        EventKind::EnableSecondary => "enable secondary".into(),
        EventKind::DisableSecondary => "disable secondary".into(),
        EventKind::SetCplMask { buses: None, on } => format!("constant-power loads {} on all buses", on_off(*on)),
        EventKind::SetCplMask { buses: Some(b), on } => {
            let list: Vec<String> = b.iter().map(|k| (k + 1).to_string()).collect();
            format!("constant-power loads {} on buses {}", on_off(*on), list.join(" "))
        }
        EventKind::SetZipValues { bus, conductance, current, power } => {
            format!("bus {} ZIP set to G = {conductance} S, I = {current} A, P = {power} W", bus + 1)
        }
        EventKind::UnplugGen(i) => format!("unplug generator {}", i + 1),
        EventKind::ReplugGen(i) => format!("replug generator {}", i + 1),
        EventKind::SetCommLink { i, j, on } => format!("link {}-{} {}", i + 1, j + 1, on_off(*on)),
    }
}

fn on_off(on: bool) -> &'static str {
    if on {
        "on"
    } else {
        "off"
    }
}

pub fn emit_events(events: &[EventRecord], path: &Path) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["t[s]", "scheduled[s]", "event", "status", "mismatch[V]", "note"]).map_err(csv_err(path))?;
    for e in events {
        let (status, mismatch) = match e.status {
            EventStatus::Applied => ("applied", String::new()),
            EventStatus::Deferred { mismatch } => ("deferred", number(mismatch)),
        };
        w.write_record([number(e.t), number(e.scheduled), describe_event(&e.kind), status.into(), mismatch, e.note.clone()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| OutputError::Io { path: path.display().to_string(), source })
}

pub fn write_text(text: &str, path: &Path) -> Result<(), OutputError> {
    let io = |source| OutputError::Io { path: path.display().to_string(), source };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    f.write_all(text.as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}
