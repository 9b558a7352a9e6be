//! `cbso export`: run log to wide and long metric tables.

use std::path::{Path, PathBuf};

use cbso::record::{long_table, metrics_table, parse_run_log};

pub const LONG_TABLE: &str = "metrics_long.csv";

/// Reads a JSON-lines run log and writes `metrics.csv` and `metrics_long.csv` into `dir`.
pub fn execute_export(log: &Path, dir: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    let text = std::fs::read_to_string(log).map_err(|e| cbso::Error::Config(format!("{}: {e}", log.display())))?;
    let records = parse_run_log(&text)?;
    std::fs::create_dir_all(dir)?;
    let wide = dir.join(crate::run::METRICS);
    let long = dir.join(LONG_TABLE);
    std::fs::write(&wide, metrics_table(&records))?;
    std::fs::write(&long, long_table(&records))?;
    Ok((wide, long))
}
