//! `cbso oracle`: dense-grid reference solution for a synthetic config.

use std::path::{Path, PathBuf};

use cbso::config::{BuiltProblem, ResolvedConfig};
use cbso::synthetic::{grid_bilevel_oracle, GridOracleResult, GridResolution};

/// Computes the grid oracle and writes `oracle_<cache key>.csv` into `dir`.
pub fn execute_oracle(cfg: &ResolvedConfig, dir: &Path) -> anyhow::Result<(GridOracleResult, PathBuf)> {
    let BuiltProblem::Synthetic(problem) = cfg.config.build_problem()? else {
        return Err(cbso::Error::Config("the grid oracle is available for synthetic problems only".into()).into());
    };
    let coeffs = cfg.config.coefficients(problem.c0)?;
    let res = GridResolution {
        x_step: cfg.config.oracle.x_step,
        y_step: cfg.config.oracle.y_step,
    };
    let result = grid_bilevel_oracle(&problem, &coeffs, res)?;
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("oracle_{}.csv", GridOracleResult::cache_key(&problem, &res, &coeffs)));
    std::fs::write(&path, result.to_table())?;
    Ok((result, path))
}
