//! `cbso sweep`: one run per value of a single config axis.

use std::fmt::Write as _;
use std::path::Path;

use cbso::analysis::{fit_rate, running_average};
use cbso::config::{sweep_key, sweep_value, ResolvedConfig};
use cbso::record::{fmt_float, RunRecord};
use rayon::prelude::*;

use crate::run::{execute, RunSummary};

pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub summary: RunSummary,
    pub rate_slope: Option<f64>,
}

/// Slope of the log running average of squared gradient norms against `log t`.
/// Uses envelope-probe norms when the run has them, else the estimated `|grad phi|`.
pub fn rate_slope(log: &[RunRecord], window: Option<(f64, f64)>) -> Option<f64> {
    let probed: Vec<(f64, f64)> = log
        .iter()
        .filter_map(|r| r.envelope_grad_norm.map(|g| ((r.t + 1) as f64, g * g)))
        .collect();
    let series = if probed.len() >= 2 {
        probed
    } else {
        log.iter().map(|r| ((r.t + 1) as f64, r.phi_hat_grad_norm.powi(2))).collect()
    };
    let last = series.last()?.0;
    let window = window.unwrap_or((last / 10.0, last));
    fit_rate(&running_average(&series), window).ok().map(|f| f.slope)
}

/// Axis and values from flags, falling back to the config's `[sweep]` section.
pub fn resolve_axis(cfg: &ResolvedConfig, axis: Option<&str>, values: Option<&[f64]>) -> anyhow::Result<(String, Vec<f64>)> {
    let axis = axis
        .map(str::to_string)
        .or_else(|| cfg.config.sweep.axis.clone())
        .ok_or_else(|| cbso::Error::Config("sweep needs --axis or sweep.axis".into()))?;
    let values = values.map(<[f64]>::to_vec).unwrap_or_else(|| cfg.config.sweep.values.clone());
    if values.is_empty() {
        return Err(cbso::Error::Config("sweep has no values".into()).into());
    }
    Ok((axis, values))
}

/// Runs every point in parallel into `dir/point_<i>` and writes the summary table.
pub fn execute_sweep(cfg: &ResolvedConfig, axis: &str, values: &[f64], dir: &Path) -> anyhow::Result<Vec<SweepPoint>> {
    let key = sweep_key(axis)?;
    let configs = values
        .iter()
        .map(|v| cfg.with_override(key, sweep_value(key, *v)?))
        .collect::<cbso::Result<Vec<_>>>()?;
    std::fs::create_dir_all(dir)?;
    let window = cfg.config.sweep.fit_window;
    let points = configs
        .par_iter()
        .zip(values)
        .enumerate()
        .map(|(i, (c, v))| {
            let out = execute(c, &dir.join(format!("point_{i}")))?;
            Ok(SweepPoint {
                value: *v,
                rate_slope: rate_slope(&out.state.log, window),
                summary: out.summary,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    std::fs::write(dir.join(SWEEP_SUMMARY), summary_table(axis, &points))?;
    Ok(points)
}

pub fn summary_table(axis: &str, points: &[SweepPoint]) -> String {
    let mut s = String::from("axis,value,h_plus_y,h_plus_z,g_gap,final_grad_norm,epsilon_lambda,rate_slope\n");
    for p in points {
        let m = &p.summary;
        let _ = writeln!(
            s,
            "{axis},{},{},{},{},{},{},{}",
            fmt_float(p.value),
            fmt_float(m.h_plus_y),
            fmt_float(m.h_plus_z),
            fmt_float(m.g_gap),
            fmt_float(m.final_grad_norm),
            fmt_float(m.epsilon_lambda),
            p.rate_slope.map(fmt_float).unwrap_or_default()
        );
    }
    s
}
