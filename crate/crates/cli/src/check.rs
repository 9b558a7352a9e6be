//! `cbso check`: named property suites over the analysis layer.

use cbso::analysis::{
    analytic_cross_lipschitz, box_sampler, catalog, check_argmin_equivalence, check_cross_lipschitz, check_envelope_gap,
    check_envelope_pl, check_hypomonotone_inner_product, dense_grid_envelope, envelope_continuity,
    estimate_hypomonotonicity, prox_point, tau_mismatch_rate, CheckReport, Objective, ProxSolverConfig,
};
use cbso::cmdp::{CmdpDefinition, CmdpSpec, LinearClippedReward, RandomCmdpConfig, SoftmaxPolicy};
use cbso::config::{parse_override, set_dotted};
use cbso::estimators::h_hat;
use cbso::objectives::{constraint_h_exact, grad_x_g_exact, Annotator, AnnotatorKind, Baseline, RlhfProblem};
use cbso::synthetic::{make_problem, GradComponent, CATALOG};
use cbso::{ParamVector, RngStreamSpec};
use rand::Rng;
use serde::Deserialize;

pub const SUITES: [&str; 9] = [
    "prox",
    "envelope_gap",
    "hypomonotonicity",
    "argmin",
    "cross_lipschitz",
    "envelope_pl",
    "continuity",
    "tau_mismatch",
    "gradient_gate",
];

/// Tunables of the check suites; every field can be set with `--set key=value`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Lipschitz constant declared for `|v|` in the envelope-gap suite.
    pub abs_lipschitz: f64,
    pub gap_lambda: f64,
    pub hypo_pairs: usize,
    pub cross_pairs: usize,
    pub tau_trials: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            abs_lipschitz: 1.0,
            gap_lambda: 0.5,
            hypo_pairs: 10_000,
            cross_pairs: 2_000,
            tau_trials: 200,
        }
    }
}

impl CheckOptions {
    pub fn load(text: Option<&str>, sets: &[String]) -> anyhow::Result<Self> {
        let mut doc: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| cbso::Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for s in sets {
            let (k, v) = parse_override(s)?;
            set_dotted(&mut doc, &k, v)?;
        }
        let opts: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| cbso::Error::Config(e.to_string()))?;
        Ok(opts)
    }
}

/// Parses `--suite`: comma list, `all`, or `none`/empty for no suites.
pub fn parse_suites(spec: Option<&str>) -> anyhow::Result<Vec<&'static str>> {
    let spec = spec.unwrap_or("all").trim();
    if spec.is_empty() || spec == "none" {
        return Ok(vec![]);
    }
    if spec == "all" {
        return Ok(SUITES.to_vec());
    }
    spec.split(',')
        .map(|s| {
            let s = s.trim();
            SUITES
                .iter()
                .find(|n| **n == s)
                .copied()
                .ok_or_else(|| cbso::Error::Config(format!("unknown suite '{s}' (known: {})", SUITES.join(", "))).into())
        })
        .collect()
}

pub fn run_suites(names: &[&str], opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let mut report = CheckReport::default();
    for name in names {
        let part = match *name {
            "prox" => prox_suite()?,
            "envelope_gap" => envelope_gap_suite(opts)?,
            "hypomonotonicity" => hypomonotonicity_suite(opts)?,
            "argmin" => argmin_suite(),
            "cross_lipschitz" => cross_lipschitz_suite(opts)?,
            "envelope_pl" => envelope_pl_suite()?,
            "continuity" => continuity_suite()?,
            "tau_mismatch" => tau_mismatch_suite(opts)?,
            "gradient_gate" => gradient_gate_suite(),
            other => return Err(cbso::Error::Config(format!("unknown suite '{other}'")).into()),
        };
        report.extend(part);
    }
    Ok(report)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn points(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    linspace(lo, hi, n).into_iter().map(|v| vec![v]).collect()
}

fn huber(x: f64, lambda: f64) -> f64 {
    if x.abs() <= lambda {
        x * x / (2.0 * lambda)
    } else {
        x.abs() - lambda / 2.0
    }
}

/// Closed-form proxes: `x / (1 + lambda)` for `v^2/2` and the Huber envelope of `|v|`.
pub fn prox_suite() -> anyhow::Result<CheckReport> {
    let mut r = CheckReport::default();
    let q = catalog::quadratic();
    let mut worst = 0.0f64;
    for (x, lambda, scale) in [(2.0, 1.0, 1.0), (-3.0, 0.5, 3.0), (0.7, 2.0, 1.5), (1.3, 0.3, 4.0)] {
        let cfg = ProxSolverConfig {
            step_scale: scale,
            ..Default::default()
        };
        let p = prox_point(&q, &[x], lambda, &cfg)?;
        worst = worst.max((p.prox_point.as_slice()[0] - x / (1.0 + lambda)).abs());
    }
    r.push_le("prox_quadratic_error", worst, 1e-8);
    let a = catalog::abs();
    let cfg = ProxSolverConfig {
        max_iters: 20_000,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for x in linspace(-3.0, 3.0, 100) {
        let p = prox_point(&a, &[x], 1.0, &cfg)?;
        worst = worst.max((p.envelope_value - huber(x, 1.0)).abs());
    }
    r.push_le("envelope_abs_huber_error", worst, 1e-6);
    Ok(r)
}

/// Gap `f - f_lambda <= L^2 lambda / 2`.
pub fn envelope_gap_suite(opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let lambda = opts.gap_lambda;
    let cfg = ProxSolverConfig {
        max_iters: 20_000,
        ..Default::default()
    };
    let mut r = CheckReport::default();
    r.extend(check_envelope_gap("abs", &catalog::abs(), opts.abs_lipschitz, lambda, &points(-3.0, 3.0, 41), &cfg, 1e-6)?);
    r.extend(check_envelope_gap("sine", &catalog::sine(), 1.0, lambda, &points(-10.0, 10.0, 41), &cfg, 1e-6)?);
    r.extend(check_envelope_gap("constant", &catalog::constant(), 0.0, lambda, &points(-3.0, 3.0, 11), &cfg, 1e-6)?);
    // random piecewise-linear f with slopes in [-L, L]; envelope from the dense grid
    let mut rng = RngStreamSpec::derive(opts.seed, "check.piecewise", 0, 0).rng();
    let l = 2.0;
    let knots = linspace(-4.0, 4.0, 17);
    let slopes: Vec<f64> = (0..knots.len() - 1).map(|_| rng.random_range(-l..=l)).collect();
    let grid = linspace(-4.0, 4.0, 4001);
    let values: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let mut v = 0.0;
            for (i, s) in slopes.iter().enumerate() {
                v += s * (x.min(knots[i + 1]) - knots[i]).max(0.0);
            }
            v
        })
        .collect();
    let env = dense_grid_envelope(&values, &grid, lambda);
    let worst = values.iter().zip(&env).map(|(f, e)| f - e).fold(0.0, f64::max);
    r.push_le("envelope_gap[piecewise_linear]", worst, 0.5 * l * l * lambda + 1e-6);
    Ok(r)
}

pub fn hypomonotonicity_suite(opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let mut r = CheckReport::default();
    let s = |tag: &str| RngStreamSpec::derive(opts.seed, tag, 0, 0);
    let sampler = || box_sampler(vec![(-10.0, 10.0)]);
    let q = estimate_hypomonotonicity(&catalog::quadratic(), sampler(), 1000, s("check.hypo.quadratic"));
    r.push_le("rho_hat[quadratic]", q, 1e-12);
    let nq = estimate_hypomonotonicity(&catalog::neg_quadratic(), sampler(), 1000, s("check.hypo.neg_quadratic"));
    r.push("rho_hat[neg_quadratic]", nq, 1.0, (nq - 1.0).abs() <= 1e-9);
    let sine = estimate_hypomonotonicity(&catalog::sine(), sampler(), opts.hypo_pairs, s("check.hypo.sine"));
    r.push_le("rho_hat[sine]", sine, 1.0 + 1e-6);
    let cfg = ProxSolverConfig {
        step_scale: 2.0,
        max_iters: 5000,
        ..Default::default()
    };
    r.extend(check_hypomonotone_inner_product("sine", &catalog::sine(), 1.0, 0.5, &points(-5.0, 5.0, 21), &cfg, 1e-6)?);
    Ok(r)
}

pub fn argmin_suite() -> CheckReport {
    let mut r = CheckReport::default();
    let grid = points(-2.0, 2.0, 401);
    let cell = 0.01;
    r.extend(check_argmin_equivalence("double_well", &catalog::double_well(), 0.1, &grid, cell, 1e-9));
    r.extend(check_argmin_equivalence("quadratic", &catalog::quadratic(), 0.5, &grid, cell, 1e-9));
    r.extend(check_argmin_equivalence("abs", &catalog::abs(), 0.5, &grid, cell, 1e-9));
    r
}

/// A one-state CMDP whose inner loss is linear in the induced action distribution.
pub fn one_state_problem(seed: u64) -> anyhow::Result<RlhfProblem> {
    let n_actions = 3;
    let mut rng = RngStreamSpec::derive(seed, "check.one_state", 0, 0).rng();
    let mut feats = |d: usize| -> Vec<f64> { (0..n_actions * d).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let def = CmdpDefinition {
        n_states: 1,
        n_actions,
        gamma: 0.5,
        c0: 0.5,
        initial_dist: vec![1.0],
        transition: vec![1.0; n_actions],
        cost: vec![0.2, 0.5, 0.9],
        cost_bound: None,
        reward_dim: 2,
        reward_features: feats(2),
        policy_dim: 2,
        policy_features: feats(2),
    };
    let mdp = CmdpSpec::new(def)?;
    Ok(RlhfProblem {
        ref_policy: SoftmaxPolicy::new(&mdp, &ParamVector::zeros(2))?,
        r_max: 5.0,
        beta: 0.0,
        annotator: Annotator {
            kind: AnnotatorKind::BradleyTerry,
            true_reward: LinearClippedReward::new(ParamVector::new(vec![1.0, -0.5])?, 5.0)?,
        },
        horizon: 2,
        n_rollouts_per_q: 1,
        baseline: Baseline::LeaveOneOut,
        eval_pairs: 16,
        x_box: None,
        mdp,
    })
}

/// Sampled Lipschitz constant of `y -> grad_x h1(x, y)` on the one-state CMDP.
pub fn cmdp_cross_lipschitz(prob: &RlhfProblem, sigma1: f64, n_pairs: usize, stream: RngStreamSpec) -> f64 {
    let x = ParamVector::new(vec![0.4, -0.3]).expect("finite");
    let reward = prob.reward(&x).expect("dims");
    let grad = |y: &[f64]| -> Vec<f64> {
        let yv = ParamVector::new(y.to_vec()).expect("finite");
        let fx = prob.grad_x_f_exact_enumerated(&x, &yv).expect("dims");
        let gx = grad_x_g_exact(&reward, &prob.policy(&yv).expect("dims"), &prob.mdp).expect("solvable");
        fx.iter().zip(&gx).map(|(a, b)| a + b / sigma1).collect()
    };
    check_cross_lipschitz(grad, box_sampler(vec![(-2.0, 2.0); 2]), n_pairs, stream)
}

pub fn cross_lipschitz_suite(opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let mut r = CheckReport::default();
    let prob = one_state_problem(opts.seed)?;
    let estimates: Vec<f64> = (0..3)
        .map(|i| cmdp_cross_lipschitz(&prob, 0.1, opts.cross_pairs, RngStreamSpec::derive(opts.seed, "check.cross", i, 0)))
        .collect();
    let hi = estimates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = estimates.iter().cloned().fold(f64::INFINITY, f64::min);
    r.push("cross_lipschitz_finite[one_state]", hi, f64::INFINITY, hi.is_finite() && hi > 0.0);
    r.push_le("cross_lipschitz_seed_spread[one_state]", (hi - lo) / hi, 0.1);
    // g independent of y: grad_x h2 does not move with y
    let flat = check_cross_lipschitz(
        |_y: &[f64]| vec![2.0 * (0.3 - 1.0)],
        box_sampler(vec![(-2.0, 2.0)]),
        100,
        RngStreamSpec::derive(opts.seed, "check.cross.flat", 0, 0),
    );
    r.push_le("cross_lipschitz[y_independent]", flat, 0.0);
    // P2: grad_x f is y-free and grad_x g = -2 (y - x), so the constant is 2 / sigma1
    let p2 = make_problem("P2")?;
    let sigma1 = 0.1;
    let measured = check_cross_lipschitz(
        |y: &[f64]| {
            let x = [0.2];
            let fx = p2.exact_grad(GradComponent::FX, &x, y);
            let gx = p2.exact_grad(GradComponent::GX, &x, y);
            vec![fx[0] + gx[0] / sigma1]
        },
        box_sampler(p2.y_box.clone()),
        opts.cross_pairs,
        RngStreamSpec::derive(opts.seed, "check.cross.p2", 0, 0),
    );
    let analytic = analytic_cross_lipschitz(0.0, 2.0, sigma1);
    r.push_le("cross_lipschitz_vs_analytic[P2]", measured, analytic + 1e-9);
    let halved = analytic_cross_lipschitz(0.0, 2.0, sigma1 / 2.0) - analytic;
    r.push("analytic_cross_lipschitz_sigma1_halved", halved, 2.0 / sigma1, (halved - 2.0 / sigma1).abs() <= 1e-9);
    Ok(r)
}

pub fn envelope_pl_suite() -> anyhow::Result<CheckReport> {
    let cfg = ProxSolverConfig {
        step_scale: 1.0 / 1.5,
        ..Default::default()
    };
    Ok(check_envelope_pl("quadratic", &catalog::quadratic(), 1.0, 0.0, 0.5, &points(-3.0, 3.0, 21), &cfg, 1e-9)?)
}

/// Probe gradient norms move by at most the envelope-gradient Lipschitz
/// constant `max(1/lambda, rho/(1 - rho lambda))` times the perturbation.
pub fn continuity_suite() -> anyhow::Result<CheckReport> {
    let mut r = CheckReport::default();
    let delta = 1e-4;
    let cfg = ProxSolverConfig {
        step_scale: 1.0,
        max_iters: 5000,
        ..Default::default()
    };
    let cases: [(&str, Box<dyn Objective>, f64, f64); 3] = [
        ("quadratic", Box::new(catalog::quadratic()), 0.0, 0.5),
        ("sine", Box::new(catalog::sine()), 1.0, 0.5),
        ("double_well", Box::new(catalog::double_well()), 4.0, 0.1),
    ];
    for (name, obj, rho, lambda) in cases {
        let lip = (1.0 / lambda).max(rho / (1.0 - rho * lambda));
        let worst = envelope_continuity(obj.as_ref(), &points(-1.8, 1.8, 19), lambda, delta, &cfg)?;
        r.push_le(format!("envelope_continuity[{name}]"), worst, lip * delta * (1.0 + 1e-3) + 1e-6);
    }
    Ok(r)
}

/// Random CMDP for the indicator-mismatch diagnostic.
pub fn tau_cmdp(seed: u64, horizon: usize) -> anyhow::Result<RlhfProblem> {
    let mdp = CmdpSpec::random(
        &RandomCmdpConfig {
            n_states: 5,
            n_actions: 3,
            reward_dim: 2,
            policy_dim: 4,
            gamma: 0.8,
            c0: 0.0,
            cost_bound: 1.0,
        },
        seed,
    )?;
    Ok(RlhfProblem {
        ref_policy: SoftmaxPolicy::new(&mdp, &ParamVector::zeros(4))?,
        r_max: 1.0,
        beta: 0.0,
        annotator: Annotator {
            kind: AnnotatorKind::GroundTruth,
            true_reward: LinearClippedReward::new(ParamVector::zeros(2), 1.0)?,
        },
        horizon,
        n_rollouts_per_q: 1,
        baseline: Baseline::LeaveOneOut,
        eval_pairs: 1,
        x_box: None,
        mdp,
    })
}

/// Per offset `k * sd / sqrt(16)` around `h(y)`: mismatch rates at `B = 16` and `B = 256`.
pub fn tau_mismatch_sweep(
    prob: &RlhfProblem,
    y: &ParamVector,
    offsets: &[f64],
    trials: usize,
    stream: RngStreamSpec,
) -> anyhow::Result<Vec<(f64, f64, f64)>> {
    let h = constraint_h_exact(&prob.policy(y)?, &prob.mdp)?;
    // single-sample spread of the constraint estimate
    let singles: Vec<f64> = (0..2000)
        .map(|j| h_hat(prob, y, 1, stream.child(1 << 40).child(j)))
        .collect::<cbso::Result<_>>()?;
    let mean = singles.iter().sum::<f64>() / singles.len() as f64;
    let sd = (singles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (singles.len() - 1) as f64).sqrt();
    let mut out = Vec::new();
    for (i, k) in offsets.iter().enumerate() {
        let c0 = h + k * sd / 4.0;
        let rates = tau_mismatch_rate(h, c0, &[16, 256], trials, stream.child(i as u64), |b, s| {
            h_hat(prob, y, b, s).expect("valid batch")
        });
        out.push((*k, rates[0].1, rates[1].1));
    }
    Ok(out)
}

pub const TAU_OFFSETS: [f64; 7] = [-3.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0];

pub fn tau_mismatch_suite(opts: &CheckOptions) -> anyhow::Result<CheckReport> {
    let prob = tau_cmdp(opts.seed, 60)?;
    let y = ParamVector::new(vec![0.3, -0.2, 0.1, 0.4])?;
    let rows = tau_mismatch_sweep(&prob, &y, &TAU_OFFSETS, opts.tau_trials, RngStreamSpec::derive(opts.seed, "check.tau", 0, 0))?;
    let mut r = CheckReport::default();
    for (k, r16, r256) in rows {
        r.push_le(format!("tau_mismatch_b256_le_b16[offset={k}]"), r256, r16);
    }
    Ok(r)
}

pub fn gradient_gate_suite() -> CheckReport {
    let mut r = CheckReport::default();
    for name in CATALOG {
        let ok = make_problem(name).and_then(|p| p.check_gradients(100, 1e-5)).is_ok();
        r.push(format!("gradient_gate[{name}]"), if ok { 0.0 } else { 1.0 }, 0.0, ok);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_selection() {
        assert_eq!(parse_suites(None).unwrap().len(), SUITES.len());
        assert!(parse_suites(Some("none")).unwrap().is_empty());
        assert!(parse_suites(Some("  ")).unwrap().is_empty());
        assert_eq!(parse_suites(Some("prox, argmin")).unwrap(), vec!["prox", "argmin"]);
        assert!(parse_suites(Some("prox,nope")).is_err());
    }

    #[test]
    fn options_from_file_and_overrides() {
        let o = CheckOptions::load(Some("seed = 4\nabs_lipschitz = 2.0"), &["abs_lipschitz=0.5".into()]).unwrap();
        assert_eq!(o.seed, 4);
        assert_eq!(o.abs_lipschitz, 0.5);
        assert_eq!(o.tau_trials, CheckOptions::default().tau_trials);
        assert!(CheckOptions::load(None, &["typo=1".into()]).is_err());
    }

    #[test]
    fn huber_closed_form() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(-2.0, 1.0), 1.5);
    }
}
