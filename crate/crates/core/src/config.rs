//! Experiment configuration: a TOML document with dotted-key overrides,
//! resolved into a typed [`ExperimentConfig`] and then into a problem plus a
//! [`CbsoConfig`].

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::analysis::ProxSolverConfig;
use crate::cbso::{BilevelProblem, CbsoConfig, ProbeConfig};
use crate::cmdp::{CmdpDefinition, CmdpSpec, LinearClippedReward, RandomCmdpConfig, SoftmaxPolicy};
use crate::error::{Error, Result};
use crate::objectives::{constraint_h_exact, Annotator, AnnotatorKind, Baseline, RlhfProblem};
use crate::params::ParamVector;
use crate::penalty::{epsilon_lambda, validate_penalty_coefficients, PenaltyCoefficients};
use crate::rng::RngStreamSpec;
use crate::schedule::StepSchedule;
use crate::synthetic::{make_problem, NoiseLevels, SyntheticProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Synthetic,
    CmdpRlhf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub track: Track,
    #[serde(default)]
    pub problem: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub horizon: usize,
    #[serde(default = "yes")]
    pub warm_start_inner: bool,
    #[serde(default)]
    pub share_inner_batches: bool,
    #[serde(default)]
    pub project_x: bool,
    #[serde(default)]
    pub log_inner: bool,
    /// 0 disables periodic checkpoints; the final checkpoint is always written.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub record_wall_clock: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulesSection {
    pub outer: StepSchedule,
    pub inner: StepSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    /// Defaults to `y0`.
    #[serde(default)]
    pub z0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_probe_every")]
    pub every: usize,
    pub lambda: f64,
    #[serde(default)]
    pub solver: ProxSolverConfig,
}

fn default_probe_every() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(default = "default_noise")]
    pub noise_f: f64,
    #[serde(default = "default_noise")]
    pub noise_g: f64,
    #[serde(default = "default_noise")]
    pub noise_h: f64,
    #[serde(default)]
    pub c0: Option<f64>,
    /// Grid step for the sup-norms `C_f`, `C_g`.
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            noise_f: 0.1,
            noise_g: 0.1,
            noise_h: 0.1,
            c0: None,
            grid_step: 0.01,
        }
    }
}

fn default_noise() -> f64 {
    0.1
}

fn default_grid_step() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdpSection {
    /// JSON file holding a [`CmdpDefinition`]; overrides the random generator.
    #[serde(default)]
    pub definition: Option<String>,
    #[serde(default = "default_states")]
    pub n_states: usize,
    #[serde(default = "default_actions")]
    pub n_actions: usize,
    #[serde(default = "default_reward_dim")]
    pub reward_dim: usize,
    #[serde(default = "default_policy_dim")]
    pub policy_dim: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_cost_bound")]
    pub cost_bound: f64,
    #[serde(default)]
    pub generator_seed: u64,
    /// Absolute constraint threshold.
    #[serde(default)]
    pub c0: Option<f64>,
    /// Threshold as a multiple of the uniform policy's constraint value, used when `c0` is absent.
    #[serde(default = "default_c0_scale")]
    pub c0_scale: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_rollouts")]
    pub n_rollouts_per_q: usize,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default = "default_eval_pairs")]
    pub eval_pairs: usize,
    #[serde(default = "default_annotator")]
    pub annotator: AnnotatorKind,
    #[serde(default)]
    pub true_reward: Option<Vec<f64>>,
    /// Seed of the standard-normal hidden reward when `true_reward` is absent.
    #[serde(default)]
    pub true_reward_seed: u64,
    /// Symmetric per-coordinate box on `x`, used when `run.project_x` is set.
    #[serde(default)]
    pub x_bound: Option<f64>,
}

impl Default for CmdpSection {
    fn default() -> Self {
        toml::from_str("").expect("all cmdp fields have defaults")
    }
}

fn default_states() -> usize {
    6
}
fn default_actions() -> usize {
    3
}
fn default_reward_dim() -> usize {
    4
}
fn default_policy_dim() -> usize {
    6
}
fn default_gamma() -> f64 {
    0.8
}
fn default_cost_bound() -> f64 {
    1.0
}
fn default_c0_scale() -> f64 {
    1.05
}
fn default_r_max() -> f64 {
    3.0
}
fn default_rollouts() -> usize {
    1
}
fn default_eval_pairs() -> usize {
    64
}
fn default_annotator() -> AnnotatorKind {
    AnnotatorKind::BradleyTerry
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_oracle_step")]
    pub x_step: f64,
    #[serde(default = "default_oracle_step")]
    pub y_step: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            x_step: 1e-3,
            y_step: 1e-3,
        }
    }
}

fn default_oracle_step() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub axis: Option<String>,
    #[serde(default)]
    pub values: Vec<f64>,
    /// Window `(lo, hi)` over `t` for the per-point rate fit.
    #[serde(default)]
    pub fit_window: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub penalty: PenaltySection,
    pub schedules: SchedulesSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub probe: Option<ProbeSection>,
    #[serde(default)]
    pub synthetic: SyntheticSection,
    #[serde(default)]
    pub cmdp: CmdpSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// Parses `KEY=VALUE`; the value is read as a TOML literal, falling back to a string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_dotted(doc: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A configuration document after overrides, kept as TOML for echoing.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub document: Table,
    pub config: ExperimentConfig,
}

impl ResolvedConfig {
    pub fn from_str_with(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let mut document: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut document, k, v.clone())?;
        }
        Self::from_document(document)
    }

    pub fn from_document(document: Table) -> Result<Self> {
        let config: ExperimentConfig = Value::Table(document.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(Self { document, config })
    }

    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut document = self.document.clone();
        set_dotted(&mut document, key, value)?;
        Self::from_document(document)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.document).expect("tables always serialize")
    }
}

/// The instantiated problem of either track.
#[derive(Debug, Clone)]
pub enum BuiltProblem {
    Synthetic(SyntheticProblem),
    Rlhf(Box<RlhfProblem>),
}

impl BuiltProblem {
    pub fn as_bilevel(&self) -> &dyn BilevelProblem {
        match self {
            Self::Synthetic(p) => p,
            Self::Rlhf(p) => p.as_ref(),
        }
    }

    pub fn c0(&self) -> f64 {
        self.as_bilevel().c0()
    }

    /// Sup-norms `(C_f, C_g)` entering the violation bounds.
    pub fn sup_bounds(&self, cfg: &ExperimentConfig) -> (f64, f64) {
        match self {
            Self::Synthetic(p) => p.sup_norms(cfg.synthetic.grid_step),
            Self::Rlhf(p) => p.sup_bounds(),
        }
    }

    /// Exact constraint value `h(y)`.
    pub fn h_exact(&self, y: &ParamVector) -> Result<f64> {
        match self {
            Self::Synthetic(p) => Ok(p.h(y.as_slice())),
            Self::Rlhf(p) => p.h_exact(y),
        }
    }

    pub fn g_exact(&self, x: &ParamVector, y: &ParamVector) -> Result<f64> {
        match self {
            Self::Synthetic(p) => Ok(p.g(x.as_slice(), y.as_slice())),
            Self::Rlhf(p) => p.g_exact(x, y),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        validate_penalty_coefficients(self.penalty.sigma1, self.penalty.sigma2, self.penalty.sigma3, 0.0)?;
        self.schedules.outer.validated()?;
        self.schedules.inner.validated()?;
        if self.run.track == Track::Synthetic && self.run.problem.is_none() {
            return Err(Error::Config("run.problem is required for the synthetic track".into()));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<BuiltProblem> {
        match self.run.track {
            Track::Synthetic => {
                let name = self.run.problem.as_deref().unwrap_or_default();
                let s = &self.synthetic;
                let mut p = make_problem(name)?.with_noise(NoiseLevels {
                    f: s.noise_f,
                    g: s.noise_g,
                    h: s.noise_h,
                });
                if let Some(c0) = s.c0 {
                    p = p.with_c0(c0);
                }
                Ok(BuiltProblem::Synthetic(p))
            }
            Track::CmdpRlhf => Ok(BuiltProblem::Rlhf(Box::new(self.build_rlhf()?))),
        }
    }

    fn build_rlhf(&self) -> Result<RlhfProblem> {
        let c = &self.cmdp;
        let mdp = match &c.definition {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let def: CmdpDefinition = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path}: {e}")))?;
                CmdpSpec::new(def)?
            }
            None => CmdpSpec::random(
                &RandomCmdpConfig {
                    n_states: c.n_states,
                    n_actions: c.n_actions,
                    reward_dim: c.reward_dim,
                    policy_dim: c.policy_dim,
                    gamma: c.gamma,
                    c0: 0.0,
                    cost_bound: c.cost_bound,
                },
                c.generator_seed,
            )?,
        };
        let ref_policy = SoftmaxPolicy::new(&mdp, &ParamVector::zeros(mdp.policy_dim()))?;
        let c0 = match c.c0 {
            Some(v) => v,
            None if c.definition.is_some() => mdp.c0(),
            None => c.c0_scale * constraint_h_exact(&ref_policy, &mdp)?,
        };
        let mdp = mdp.with_c0(c0);
        let x_true = match &c.true_reward {
            Some(v) => v.clone(),
            None => {
                use rand_distr::{Distribution, StandardNormal};
                let mut rng = RngStreamSpec::derive(c.true_reward_seed, "cmdp.true_reward", 0, 0).rng();
                (0..mdp.reward_dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
            }
        };
        let true_reward = LinearClippedReward::new(ParamVector::new(x_true)?, c.r_max)?;
        Ok(RlhfProblem {
            r_max: c.r_max,
            beta: c.beta,
            ref_policy,
            annotator: Annotator {
                kind: c.annotator,
                true_reward,
            },
            horizon: self.run.horizon,
            n_rollouts_per_q: c.n_rollouts_per_q,
            baseline: c.baseline,
            eval_pairs: c.eval_pairs,
            x_box: c.x_bound.map(|b| vec![(-b, b); mdp.reward_dim()]),
            mdp,
        })
    }

    pub fn coefficients(&self, c0: f64) -> Result<PenaltyCoefficients> {
        validate_penalty_coefficients(self.penalty.sigma1, self.penalty.sigma2, self.penalty.sigma3, c0)
    }

    pub fn cbso_config(&self, c0: f64) -> Result<CbsoConfig> {
        let r = &self.run;
        let cfg = CbsoConfig {
            outer_iters: r.outer_iters,
            inner_iters: r.inner_iters,
            batch_size: r.batch_size,
            horizon: r.horizon,
            coeffs: self.coefficients(c0)?,
            outer_schedule: self.schedules.outer,
            inner_schedule: self.schedules.inner,
            warm_start_inner: r.warm_start_inner,
            project_x: r.project_x,
            share_inner_batches: r.share_inner_batches,
            seed: r.seed,
            probe: self.probe.as_ref().map(|p| ProbeConfig {
                every: p.every,
                lambda: p.lambda,
                solver: p.solver,
            }),
            log_inner: r.log_inner,
            checkpoint_every: (r.checkpoint_every > 0).then_some(r.checkpoint_every),
            record_wall_clock: r.record_wall_clock,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Initial `(x0, y0, z0)`; missing entries default to zeros.
    pub fn initial_point(&self, problem: &dyn BilevelProblem) -> Result<(ParamVector, ParamVector, ParamVector)> {
        let get = |v: &Option<Vec<f64>>, dim: usize, name: &str| -> Result<ParamVector> {
            match v {
                Some(v) if v.len() != dim => Err(Error::Config(format!(
                    "init.{name} has {} entries, problem expects {dim}",
                    v.len()
                ))),
                Some(v) => ParamVector::new(v.clone()),
                None => Ok(ParamVector::zeros(dim)),
            }
        };
        let x0 = get(&self.init.x0, problem.x_dim(), "x0")?;
        let y0 = get(&self.init.y0, problem.y_dim(), "y0")?;
        let z0 = match &self.init.z0 {
            Some(_) => get(&self.init.z0, problem.y_dim(), "z0")?,
            None => y0.clone(),
        };
        Ok((x0, y0, z0))
    }

    /// `epsilon_lambda` with the problem's sup-norms.
    pub fn epsilon_lambda(&self, problem: &BuiltProblem) -> Result<f64> {
        let (cf, cg) = problem.sup_bounds(self);
        Ok(epsilon_lambda(cf, cg, &self.coefficients(problem.c0())?))
    }
}

/// Maps sweep axis shorthands to config keys.
pub fn sweep_key(axis: &str) -> Result<&'static str> {
    Ok(match axis {
        "sigma1" | "penalty.sigma1" => "penalty.sigma1",
        "sigma2" | "penalty.sigma2" => "penalty.sigma2",
        "sigma3" | "penalty.sigma3" => "penalty.sigma3",
        "a" | "schedules.outer.a" => "schedules.outer.a",
        "B" | "batch_size" | "run.batch_size" => "run.batch_size",
        "K" | "inner_iters" | "run.inner_iters" => "run.inner_iters",
        other => {
            return Err(Error::Config(format!(
                "unknown sweep axis '{other}' (expected sigma1, sigma2, sigma3, a, B or K)"
            )))
        }
    })
}

/// TOML value for a sweep point; integer axes get integers.
pub fn sweep_value(key: &str, v: f64) -> Result<Value> {
    if key.starts_with("run.") {
        if v < 1.0 || v.fract() != 0.0 {
            return Err(Error::Config(format!("{key} needs a positive integer, got {v}")));
        }
        Ok(Value::Integer(v as i64))
    } else {
        Ok(Value::Float(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P1: &str = r#"
[run]
track = "synthetic"
problem = "P1"
outer_iters = 3
inner_iters = 2
batch_size = 4

[penalty]
sigma1 = 0.1
sigma2 = 0.01
sigma3 = 1.0

[schedules.outer]
kind = "outer_power"
c_a = 0.2
a = 0.5

[schedules.inner]
kind = "inner_harmonic"
eta = 0.05
"#;

    #[test]
    fn parses_and_applies_overrides() {
        let ov = vec![parse_override("penalty.sigma2=0.1").unwrap(), parse_override("run.seed=9").unwrap()];
        let r = ResolvedConfig::from_str_with(P1, &ov).unwrap();
        assert_eq!(r.config.penalty.sigma2, 0.1);
        assert_eq!(r.config.run.seed, 9);
        assert!(r.to_toml().contains("sigma2 = 0.1"));
        let again = ResolvedConfig::from_str_with(&r.to_toml(), &[]).unwrap();
        assert_eq!(again.config, r.config);
    }

    #[test]
    fn override_values_typed() {
        assert_eq!(parse_override("a.b=3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_override("a.b=true").unwrap().1, Value::Boolean(true));
        assert_eq!(parse_override("a.b=P2").unwrap().1, Value::String("P2".into()));
        assert_eq!(parse_override("a.b=[1.0, 2.0]").unwrap().1.as_array().unwrap().len(), 2);
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ResolvedConfig::from_str_with(P1, &[parse_override("penalty.sigma1=-1").unwrap()]).is_err());
        assert!(ResolvedConfig::from_str_with(P1, &[parse_override("run.typo=1").unwrap()]).is_err());
        assert!(ResolvedConfig::from_str_with("[run]\n", &[]).is_err());
        let r = ResolvedConfig::from_str_with(P1, &[parse_override("run.problem=P9").unwrap()]).unwrap();
        assert!(matches!(r.config.build_problem(), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn builds_both_tracks() {
        let r = ResolvedConfig::from_str_with(P1, &[]).unwrap();
        let p = r.config.build_problem().unwrap();
        assert_eq!(p.as_bilevel().x_dim(), 1);
        let (x0, y0, z0) = r.config.initial_point(p.as_bilevel()).unwrap();
        assert_eq!((x0.dim(), y0.dim(), z0.dim()), (1, 1, 1));
        let ov = [
            parse_override("run.track=\"cmdp_rlhf\"").unwrap(),
            parse_override("run.horizon=5").unwrap(),
        ];
        let r = ResolvedConfig::from_str_with(P1, &ov).unwrap();
        let p = r.config.build_problem().unwrap();
        let BuiltProblem::Rlhf(rl) = &p else { panic!() };
        assert_eq!(rl.mdp.n_states(), 6);
        let uniform = SoftmaxPolicy::new(&rl.mdp, &ParamVector::zeros(6)).unwrap();
        let h0 = constraint_h_exact(&uniform, &rl.mdp).unwrap();
        assert!((rl.mdp.c0() - 1.05 * h0).abs() < 1e-12);
    }

    #[test]
    fn sweep_axes() {
        assert_eq!(sweep_key("sigma2").unwrap(), "penalty.sigma2");
        assert_eq!(sweep_key("B").unwrap(), "run.batch_size");
        assert!(sweep_key("gamma").is_err());
        assert_eq!(sweep_value("run.batch_size", 16.0).unwrap(), Value::Integer(16));
        assert!(sweep_value("run.inner_iters", 1.5).is_err());
    }
}
