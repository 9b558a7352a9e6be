//! Per-iteration log rows and their on-disk encodings.
//!
//! * run log: one JSON object per line, keys sorted;
//! * metrics table: comma-separated, fixed column order, 17 significant digits;
//! * long table: `(iteration, metric, value)` rows for plotting tools.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub t: usize,
    pub phi_hat_grad_norm: f64,
    pub h_of_y: f64,
    pub h1_value: f64,
    pub h2_value: f64,
    pub envelope_grad_norm: Option<f64>,
    pub envelope_residual: Option<f64>,
    pub outer_step: f64,
    pub x: Vec<f64>,
    pub wall_clock_ms: u64,
}

/// One inner subgradient step (opt-in logging).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerRecord {
    pub t: usize,
    pub k: usize,
    pub inner_step: f64,
    pub h1_estimate: f64,
    pub h2_estimate: f64,
    pub tau_y: f64,
    pub tau_z: f64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "t",
    "phi_grad_norm",
    "h_of_y",
    "h1",
    "h2",
    "envelope_grad_norm",
    "envelope_residual",
];

/// Serializes any record as a single JSON line with sorted keys.
pub fn to_json_line<T: Serialize>(record: &T) -> Result<String> {
    // serde_json::Map is ordered by key, so routing through Value sorts fields.
    let value = serde_json::to_value(record).map_err(|e| Error::Config(e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| Error::Config(e.to_string()))
}

/// Parses a run log; errors name the 1-based line number.
pub fn parse_run_log(text: &str) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    check_increasing(&out)?;
    Ok(out)
}

fn check_increasing(records: &[RunRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::Config(format!(
                "iteration index not increasing: {} after {}",
                w[1].t, w[0].t
            )));
        }
    }
    Ok(())
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn metrics_table(records: &[RunRecord]) -> String {
    let mut s = METRICS_HEADER.join(",");
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.t,
            fmt_float(r.phi_hat_grad_norm),
            fmt_float(r.h_of_y),
            fmt_float(r.h1_value),
            fmt_float(r.h2_value),
            fmt_opt(r.envelope_grad_norm),
            fmt_opt(r.envelope_residual),
        );
    }
    s
}

/// Parsed metrics row: `t` plus the six value columns (`None` for blanks).
pub type MetricsRow = (usize, [Option<f64>; 6]);

pub fn parse_metrics_table(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty metrics table".into()))?;
    if header != METRICS_HEADER.join(",") {
        return Err(Error::Config(format!("unexpected metrics header '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| Error::Config(format!("metrics line {}: {what}", i + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != METRICS_HEADER.len() {
            return Err(bad("wrong column count"));
        }
        let t = fields[0].parse().map_err(|_| bad("bad iteration index"))?;
        let mut vals = [None; 6];
        for (slot, f) in vals.iter_mut().zip(&fields[1..]) {
            if !f.is_empty() {
                *slot = Some(f.parse().map_err(|_| bad("bad number"))?);
            }
        }
        rows.push((t, vals));
    }
    Ok(rows)
}

pub fn long_table(records: &[RunRecord]) -> String {
    let mut s = String::from("iteration,metric,value\n");
    for r in records {
        let metrics = [
            ("phi_grad_norm", Some(r.phi_hat_grad_norm)),
            ("h_of_y", Some(r.h_of_y)),
            ("h1", Some(r.h1_value)),
            ("h2", Some(r.h2_value)),
            ("envelope_grad_norm", r.envelope_grad_norm),
            ("envelope_residual", r.envelope_residual),
        ];
        for (name, v) in metrics {
            if let Some(v) = v {
                let _ = writeln!(s, "{},{},{}", r.t, name, fmt_float(v));
            }
        }
    }
    s
}
