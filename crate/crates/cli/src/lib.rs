//! Command implementations behind the `cbso` binary. Every command writes into
//! an output directory and reports an exit status:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | a property check failed |
//! | 2 | configuration error or missing input |
//! | 3 | non-finite iterate or divergence |

use std::path::{Path, PathBuf};

use cbso::config::{parse_override, ResolvedConfig};

pub mod check;
pub mod export;
pub mod oracle;
pub mod run;
pub mod sweep;

/// Default output root when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "CBSO_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    CheckFailed = 1,
    ConfigError = 2,
    NonFinite = 3,
}

impl Status {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Exit status for an error surfaced by a command.
pub fn classify(err: &anyhow::Error) -> Status {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cbso::Error>() {
            return match e {
                cbso::Error::NonFiniteIterate { .. } | cbso::Error::Diverged { .. } => Status::NonFinite,
                _ => Status::ConfigError,
            };
        }
    }
    Status::ConfigError
}

/// `--out`, else `$CBSO_OUT_ROOT/<name>`, else `cbso-out/<name>`; created if absent.
pub fn output_dir(out: Option<&Path>, name: &str) -> anyhow::Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cbso-out"));
            root.join(name)
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Reads a config file and applies `--set` overrides and `--seed`.
pub fn load_config(path: &Path, sets: &[String], seed: Option<u64>) -> anyhow::Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| cbso::Error::Config(format!("{}: {e}", path.display())))?;
    let mut overrides = sets.iter().map(|s| parse_override(s)).collect::<cbso::Result<Vec<_>>>()?;
    if let Some(seed) = seed {
        overrides.push(("run.seed".into(), toml::Value::Integer(seed as i64)));
    }
    Ok(ResolvedConfig::from_str_with(&text, &overrides)?)
}

/// File stem used to name default output directories.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes() {
        let nf: anyhow::Error = cbso::Error::NonFiniteIterate {
            stage: "outer".into(),
            t: 0,
            k: 0,
            dump: String::new(),
        }
        .into();
        assert_eq!(classify(&nf), Status::NonFinite);
        let cfg: anyhow::Error = cbso::Error::Config("bad".into()).into();
        assert_eq!(classify(&cfg.context("loading")), Status::ConfigError);
        assert_eq!(Status::CheckFailed.code(), 1);
    }

    #[test]
    fn explicit_out_is_created() {
        let tmp = tempfile::tempdir().unwrap();
        let d = output_dir(Some(&tmp.path().join("a/b")), "ignored").unwrap();
        assert!(d.is_dir());
        assert_eq!(stem(Path::new("configs/p2.toml")), "p2");
    }
}
