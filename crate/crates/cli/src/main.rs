use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use cbso_cli::check::{parse_suites, run_suites, CheckOptions};
use cbso_cli::export::execute_export;
use cbso_cli::oracle::execute_oracle;
use cbso_cli::run::execute;
use cbso_cli::sweep::{execute_sweep, resolve_axis};
use cbso_cli::{classify, load_config, output_dir, stem, Status};
use clap::{Args, Parser, Subcommand};

/// Constrained bilevel subgradient optimization: runs, checks, sweeps, oracles and exports.
#[derive(Parser)]
#[command(name = "cbso", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set penalty.sigma1=0.05`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (default `$CBSO_OUT_ROOT/<config stem>` or `cbso-out/<config stem>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run CBSO once.
    Run(Common),
    /// Run property check suites and write `check_report.csv`.
    Check {
        /// Optional TOML with check options.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated suites, `all` (default) or `none`.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one CBSO execution per value of a config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// sigma1, sigma2, sigma3, a, B or K.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<f64>>,
    },
    /// Dense-grid reference solution for a synthetic problem.
    Oracle(Common),
    /// Convert a run log into metric tables.
    Export {
        /// JSON-lines run log.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c.config, &c.sets, c.seed)?;
            let dir = output_dir(c.out.as_deref(), &stem(&c.config))?;
            let out = execute(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
            println!("wrote {}", dir.display());
        }
        Command::Check { config, suite, sets, out } => {
            let text = match &config {
                Some(p) => Some(std::fs::read_to_string(p).map_err(|e| cbso::Error::Config(format!("{}: {e}", p.display())))?),
                None => None,
            };
            let opts = CheckOptions::load(text.as_deref(), &sets)?;
            let suites = parse_suites(suite.as_deref())?;
            let report = run_suites(&suites, &opts)?;
            let dir = output_dir(out.as_deref(), "check")?;
            let table = report.to_table();
            std::fs::write(dir.join("check_report.csv"), &table).context("writing check report")?;
            print!("{table}");
            if !report.all_pass() {
                return Ok(Status::CheckFailed);
            }
        }
        Command::Sweep { common: c, axis, values } => {
            let cfg = load_config(&c.config, &c.sets, c.seed)?;
            let (axis, values) = resolve_axis(&cfg, axis.as_deref(), values.as_deref())?;
            let dir = output_dir(c.out.as_deref(), &format!("{}_sweep_{axis}", stem(&c.config)))?;
            execute_sweep(&cfg, &axis, &values, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join(cbso_cli::sweep::SWEEP_SUMMARY))?);
        }
        Command::Oracle(c) => {
            let cfg = load_config(&c.config, &c.sets, c.seed)?;
            let dir = output_dir(c.out.as_deref(), &format!("{}_oracle", stem(&c.config)))?;
            let (result, path) = execute_oracle(&cfg, &dir)?;
            println!("best_x = {}", result.best_x);
            println!("bilevel_best_x = {}", result.bilevel_best_x);
            println!("wrote {}", path.display());
        }
        Command::Export { log, out } => {
            let dir = match out {
                Some(d) => d,
                None => log.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let (wide, long) = execute_export(&log, &dir)?;
            println!("wrote {} and {}", wide.display(), long.display());
        }
    }
    Ok(Status::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match dispatch(cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            classify(&e)
        }
    };
    ExitCode::from(status.code() as u8)
}
