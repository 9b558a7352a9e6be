//! `cbso run`: one CBSO execution with logs, metrics, checkpoints and a summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cbso::cbso::{run_cbso_observed, CbsoState, RunObserver};
use cbso::checkpoint::Checkpoint;
use cbso::config::{BuiltProblem, ResolvedConfig};
use cbso::penalty::violation_terms;
use cbso::record::{metrics_table, to_json_line, InnerRecord, RunRecord};
use serde::Serialize;

pub const RUN_LOG: &str = "run_log.jsonl";
pub const INNER_LOG: &str = "inner_log.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SUMMARY: &str = "summary.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Final-iterate quantities of a run, including the three violation measures
/// and their bounds `[h+(z), g(x,y) - g(x,z), h+(y)]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub c0: f64,
    pub h_y: f64,
    pub h_z: f64,
    pub h_plus_y: f64,
    pub h_plus_z: f64,
    pub g_gap: f64,
    pub final_grad_norm: f64,
    pub c_f: f64,
    pub c_g: f64,
    pub epsilon_lambda: f64,
    pub violation_bounds: [f64; 3],
}

impl RunSummary {
    pub fn compute(cfg: &ResolvedConfig, problem: &BuiltProblem, state: &CbsoState) -> anyhow::Result<Self> {
        let c0 = problem.c0();
        let coeffs = cfg.config.coefficients(c0)?;
        let (c_f, c_g) = problem.sup_bounds(&cfg.config);
        let h_y = problem.h_exact(&state.y)?;
        let h_z = problem.h_exact(&state.z)?;
        let g_gap = problem.g_exact(&state.x, &state.y)? - problem.g_exact(&state.x, &state.z)?;
        Ok(Self {
            x: state.x.as_slice().to_vec(),
            y: state.y.as_slice().to_vec(),
            z: state.z.as_slice().to_vec(),
            c0,
            h_y,
            h_z,
            h_plus_y: coeffs.hinge(h_y),
            h_plus_z: coeffs.hinge(h_z),
            g_gap,
            final_grad_norm: state.log.last().map_or(f64::NAN, |r| r.phi_hat_grad_norm),
            c_f,
            c_g,
            epsilon_lambda: cfg.config.epsilon_lambda(problem)?,
            violation_bounds: violation_terms(c_f, c_g, &coeffs),
        })
    }
}

struct FileObserver {
    log: BufWriter<File>,
    inner: Option<BufWriter<File>>,
    checkpoint_dir: PathBuf,
}

impl RunObserver for FileObserver {
    fn on_record(&mut self, record: &RunRecord) -> cbso::Result<()> {
        writeln!(self.log, "{}", to_json_line(record)?)?;
        Ok(())
    }

    fn on_inner(&mut self, record: &InnerRecord) -> cbso::Result<()> {
        if let Some(w) = &mut self.inner {
            writeln!(w, "{}", to_json_line(record)?)?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> cbso::Result<()> {
        std::fs::create_dir_all(&self.checkpoint_dir)?;
        checkpoint.write(&self.checkpoint_dir.join(format!("t{:08}.bin", checkpoint.t)))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: CbsoState,
    pub summary: RunSummary,
    pub dir: PathBuf,
}

/// Runs CBSO for a resolved config, writing every artifact into `dir`.
pub fn execute(cfg: &ResolvedConfig, dir: &Path) -> anyhow::Result<RunOutput> {
    std::fs::create_dir_all(dir)?;
    // stale outputs of an earlier run with other settings
    for stale in [dir.join("checkpoints"), dir.join(INNER_LOG)] {
        if stale.is_dir() {
            std::fs::remove_dir_all(&stale)?;
        } else if stale.is_file() {
            std::fs::remove_file(&stale)?;
        }
    }
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let problem = cfg.config.build_problem()?;
    let bilevel = problem.as_bilevel();
    let cbso_cfg = cfg.config.cbso_config(problem.c0())?;
    let (x0, y0, z0) = cfg.config.initial_point(bilevel)?;
    let mut observer = FileObserver {
        log: BufWriter::new(File::create(dir.join(RUN_LOG))?),
        inner: if cbso_cfg.log_inner {
            Some(BufWriter::new(File::create(dir.join(INNER_LOG))?))
        } else {
            None
        },
        checkpoint_dir: dir.join("checkpoints"),
    };
    let result = run_cbso_observed(&cbso_cfg, bilevel, x0, y0, z0, &mut observer);
    observer.log.flush()?;
    if let Some(w) = &mut observer.inner {
        w.flush()?;
    }
    let state = result?;
    std::fs::write(dir.join(METRICS), metrics_table(&state.log))?;
    Checkpoint {
        t: state.t as u64,
        x: state.x.clone(),
        y: state.y.clone(),
        z: state.z.clone(),
    }
    .write(&dir.join(CHECKPOINT))?;
    let summary = RunSummary::compute(cfg, &problem, &state)?;
    std::fs::write(dir.join(SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(RunOutput {
        state,
        summary,
        dir: dir.to_path_buf(),
    })
}
