//! Finite constrained MDPs with softmax-over-features policies and clipped
//! linear rewards: exact dynamic-programming oracles plus Monte-Carlo samplers.
//!
//! Tables are stored row-major: `transition[(s * A + a) * S + s']`,
//! `cost[s * A + a]`, features `[(s * A + a) * d + i]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{dot, ParamVector};
use crate::rng::RngStreamSpec;

const PROB_TOL: f64 = 1e-12;

/// On-disk / config description of a CMDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpDefinition {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub c0: f64,
    pub initial_dist: Vec<f64>,
    pub transition: Vec<f64>,
    pub cost: Vec<f64>,
    /// Declared bound `R_c` on `|c(s,a)|`; defaults to the table maximum.
    #[serde(default)]
    pub cost_bound: Option<f64>,
    pub reward_dim: usize,
    pub reward_features: Vec<f64>,
    pub policy_dim: usize,
    pub policy_features: Vec<f64>,
}

/// Parameters of the built-in random CMDP generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomCmdpConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub reward_dim: usize,
    pub policy_dim: usize,
    pub gamma: f64,
    pub c0: f64,
    #[serde(default = "default_cost_bound")]
    pub cost_bound: f64,
}

fn default_cost_bound() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmdpSpec {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    c0: f64,
    initial_dist: Vec<f64>,
    transition: Vec<f64>,
    cost: Vec<f64>,
    cost_bound: f64,
    reward_dim: usize,
    reward_features: Vec<f64>,
    policy_dim: usize,
    policy_features: Vec<f64>,
}

impl CmdpSpec {
    pub fn new(def: CmdpDefinition) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidCmdp(m));
        let (s, a) = (def.n_states, def.n_actions);
        if s == 0 || a == 0 {
            return bad("need at least one state and one action".into());
        }
        if !(def.gamma >= 0.0 && def.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", def.gamma));
        }
        let check_len = |name: &str, v: &[f64], n: usize| {
            if v.len() != n {
                Err(Error::InvalidCmdp(format!("{name} has {} entries, expected {n}", v.len())))
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(Error::InvalidCmdp(format!("{name} has non-finite entries")))
            } else {
                Ok(())
            }
        };
        check_len("initial_dist", &def.initial_dist, s)?;
        check_len("transition", &def.transition, s * a * s)?;
        check_len("cost", &def.cost, s * a)?;
        check_len("reward_features", &def.reward_features, s * a * def.reward_dim)?;
        check_len("policy_features", &def.policy_features, s * a * def.policy_dim)?;
        check_distribution("initial_dist", &def.initial_dist)?;
        for (row, p) in def.transition.chunks(s).enumerate() {
            check_distribution(&format!("transition row (s={}, a={})", row / a, row % a), p)?;
        }
        let max_cost = def.cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let cost_bound = def.cost_bound.unwrap_or(max_cost);
        if max_cost > cost_bound {
            return bad(format!("cost magnitude {max_cost} exceeds declared bound {cost_bound}"));
        }
        if !def.c0.is_finite() {
            return bad("c0 must be finite".into());
        }
        Ok(Self {
            n_states: s,
            n_actions: a,
            gamma: def.gamma,
            c0: def.c0,
            initial_dist: def.initial_dist,
            transition: def.transition,
            cost: def.cost,
            cost_bound,
            reward_dim: def.reward_dim,
            reward_features: def.reward_features,
            policy_dim: def.policy_dim,
            policy_features: def.policy_features,
        })
    }

    /// Dirichlet(1) transition rows, uniform initial distribution, costs
    /// uniform in `[0, cost_bound]`, features uniform in `[-1, 1]`.
    pub fn random(cfg: &RandomCmdpConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStreamSpec::derive(seed, "cmdp.generate", 0, 0).rng();
        let (s, a) = (cfg.n_states, cfg.n_actions);
        let mut transition = Vec::with_capacity(s * a * s);
        for _ in 0..s * a {
            let row: Vec<f64> = (0..s).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = row.iter().sum();
            transition.extend(row.iter().map(|w: &f64| w / total));
        }
        let cost = (0..s * a).map(|_| cfg.cost_bound * rng.random::<f64>()).collect();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let reward_features = uniform(s * a * cfg.reward_dim);
        let policy_features = uniform(s * a * cfg.policy_dim);
        Self::new(CmdpDefinition {
            n_states: s,
            n_actions: a,
            gamma: cfg.gamma,
            c0: cfg.c0,
            initial_dist: vec![1.0 / s as f64; s],
            transition,
            cost,
            cost_bound: Some(cfg.cost_bound),
            reward_dim: cfg.reward_dim,
            reward_features,
            policy_dim: cfg.policy_dim,
            policy_features,
        })
    }

    pub fn definition(&self) -> CmdpDefinition {
        CmdpDefinition {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            c0: self.c0,
            initial_dist: self.initial_dist.clone(),
            transition: self.transition.clone(),
            cost: self.cost.clone(),
            cost_bound: Some(self.cost_bound),
            reward_dim: self.reward_dim,
            reward_features: self.reward_features.clone(),
            policy_dim: self.policy_dim,
            policy_features: self.policy_features.clone(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn c0(&self) -> f64 {
        self.c0
    }
    pub fn cost_bound(&self) -> f64 {
        self.cost_bound
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }
    pub fn cost_table(&self) -> &[f64] {
        &self.cost
    }
    pub fn reward_dim(&self) -> usize {
        self.reward_dim
    }
    pub fn policy_dim(&self) -> usize {
        self.policy_dim
    }

    pub fn with_c0(&self, c0: f64) -> Self {
        Self { c0, ..self.clone() }
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(CmdpDefinition {
            gamma,
            ..self.definition()
        })
    }

    pub fn idx(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.idx(s, a) * self.n_states;
        &self.transition[o..o + self.n_states]
    }

    pub fn reward_features(&self, s: usize, a: usize) -> &[f64] {
        let d = self.reward_dim;
        let o = self.idx(s, a) * d;
        &self.reward_features[o..o + d]
    }

    pub fn policy_features(&self, s: usize, a: usize) -> &[f64] {
        let d = self.policy_dim;
        let o = self.idx(s, a) * d;
        &self.policy_features[o..o + d]
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.transition_row(s, a), rng)
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| *x < 0.0) {
        return Err(Error::InvalidCmdp(format!("{name} has negative entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidCmdp(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left u beyond the accumulated mass: last state with positive mass
    p.iter().rposition(|w| *w > 0.0).unwrap_or(p.len() - 1)
}

/// `pi_y(a|s) = exp(y . psi(s,a)) / sum_a' exp(y . psi(s,a'))`, tabulated
/// together with the score `grad_y log pi_y(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    params: ParamVector,
    n_actions: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    score: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(mdp: &CmdpSpec, params: &ParamVector) -> Result<Self> {
        let d = mdp.policy_dim();
        if params.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: params.dim(),
            });
        }
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut probs = vec![0.0; ns * na];
        let mut log_probs = vec![0.0; ns * na];
        let mut score = vec![0.0; ns * na * d];
        for s in 0..ns {
            let logits: Vec<f64> = (0..na)
                .map(|a| dot(params.as_slice(), mdp.policy_features(s, a)))
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            let mut mean = vec![0.0; d];
            for a in 0..na {
                let lp = logits[a] - lse;
                log_probs[s * na + a] = lp;
                probs[s * na + a] = lp.exp();
                crate::params::axpy(&mut mean, lp.exp(), mdp.policy_features(s, a));
            }
            for a in 0..na {
                let o = (s * na + a) * d;
                for (i, (f, m)) in mdp.policy_features(s, a).iter().zip(&mean).enumerate() {
                    score[o + i] = f - m;
                }
            }
        }
        Ok(Self {
            params: params.clone(),
            n_actions: na,
            probs,
            log_probs,
            score,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        self.log_probs[s * self.n_actions + a]
    }

    pub fn probs(&self, s: usize) -> &[f64] {
        let o = s * self.n_actions;
        &self.probs[o..o + self.n_actions]
    }

    /// `grad_y log pi_y(a|s)`.
    pub fn score(&self, s: usize, a: usize) -> &[f64] {
        let d = self.params.dim();
        let o = (s * self.n_actions + a) * d;
        &self.score[o..o + d]
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.probs(s), rng)
    }
}

/// `r_x(s,a) = clip(x . phi(s,a), -R, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClippedReward {
    pub params: ParamVector,
    pub r_max: f64,
}

impl LinearClippedReward {
    pub fn new(params: ParamVector, r_max: f64) -> Result<Self> {
        if !(r_max > 0.0) {
            return Err(Error::Config(format!("r_max must be positive, got {r_max}")));
        }
        Ok(Self { params, r_max })
    }

    fn raw(&self, mdp: &CmdpSpec, s: usize, a: usize) -> f64 {
        dot(self.params.as_slice(), mdp.reward_features(s, a))
    }

    pub fn value(&self, mdp: &CmdpSpec, s: usize, a: usize) -> f64 {
        self.raw(mdp, s, a).clamp(-self.r_max, self.r_max)
    }

    /// `grad_x r_x(s,a)`: the feature vector strictly inside the clip band,
    /// `None` (zero gradient) on or beyond the clip boundary.
    pub fn grad<'m>(&self, mdp: &'m CmdpSpec, s: usize, a: usize) -> Option<&'m [f64]> {
        (self.raw(mdp, s, a).abs() < self.r_max).then(|| mdp.reward_features(s, a))
    }

    pub fn table(&self, mdp: &CmdpSpec) -> Vec<f64> {
        (0..mdp.n_states())
            .flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| self.value(mdp, s, a))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    /// `sum_t grad_y log pi_y(a_t|s_t)`.
    pub log_prob_grad_accum: Vec<f64>,
}

/// Solves `(I - gamma P^pi) Q = signal` over the `|S||A|` state-action system.
pub fn exact_q(mdp: &CmdpSpec, policy: &SoftmaxPolicy, signal: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_pairs();
    if signal.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: signal.len(),
        });
    }
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.idx(s, a);
            for (s2, p) in mdp.transition_row(s, a).iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    m[(row, mdp.idx(s2, a2))] -= g * p * policy.prob(s2, a2);
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(signal);
    let q = m.clone().lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    let residual = (&m * &q - &rhs).amax();
    let scale = 1.0 + rhs.amax() / (1.0 - g);
    if !residual.is_finite() || residual > 1e-10 * scale {
        return Err(Error::SingularSystem);
    }
    Ok(q.iter().copied().collect())
}

/// Normalized discounted state-action occupancy `(1-gamma) sum_t gamma^t Pr(s_t=s) pi(a|s)`
/// from the CMDP's initial distribution.
pub fn exact_occupancy(mdp: &CmdpSpec, policy: &SoftmaxPolicy) -> Result<Vec<f64>> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    // (I - gamma P_pi^T) d = (1 - gamma) rho
    let mut m = DMatrix::<f64>::identity(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let w = policy.prob(s, a);
            for (s2, p) in mdp.transition_row(s, a).iter().enumerate() {
                m[(s2, s)] -= g * w * p;
            }
        }
    }
    let rhs = DVector::from_iterator(ns, mdp.initial_dist().iter().map(|r| (1.0 - g) * r));
    let ds = m.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    let mut d = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            d[mdp.idx(s, a)] = ds[s].max(0.0) * policy.prob(s, a);
        }
    }
    Ok(d)
}

/// `E_{s0 ~ rho, a0 ~ pi}[Q(s0, a0)]`.
pub fn start_value(mdp: &CmdpSpec, policy: &SoftmaxPolicy, q: &[f64]) -> f64 {
    let mut v = 0.0;
    for (s, rho) in mdp.initial_dist().iter().enumerate() {
        for a in 0..mdp.n_actions() {
            v += rho * policy.prob(s, a) * q[mdp.idx(s, a)];
        }
    }
    v
}

pub fn sample_trajectory(mdp: &CmdpSpec, policy: &SoftmaxPolicy, horizon: usize, stream: RngStreamSpec) -> Trajectory {
    sample_trajectory_with(mdp, policy, horizon, &mut stream.rng())
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(
    mdp: &CmdpSpec,
    policy: &SoftmaxPolicy,
    horizon: usize,
    rng: &mut R,
) -> Trajectory {
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut steps = Vec::with_capacity(horizon);
    let mut accum = vec![0.0; mdp.policy_dim()];
    let mut s = mdp.sample_initial(rng);
    for t in 0..horizon {
        let a = policy.sample_action(s, rng);
        steps.push((s, a));
        crate::params::axpy(&mut accum, 1.0, policy.score(s, a));
        if t + 1 < horizon {
            s = mdp.sample_next(s, a, rng);
        }
    }
    Trajectory {
        steps,
        log_prob_grad_accum: accum,
    }
}

/// Draws `(s_t, a_t)` with `t ~ Geometric(1 - gamma)` clamped to `horizon - 1`.
pub fn sample_occupancy_pair(
    mdp: &CmdpSpec,
    policy: &SoftmaxPolicy,
    horizon: usize,
    stream: RngStreamSpec,
) -> (usize, usize) {
    sample_occupancy_pair_with(mdp, policy, horizon, &mut stream.rng())
}

pub fn sample_occupancy_pair_with<R: Rng + ?Sized>(
    mdp: &CmdpSpec,
    policy: &SoftmaxPolicy,
    horizon: usize,
    rng: &mut R,
) -> (usize, usize) {
    assert!(horizon >= 1, "horizon must be at least 1");
    let t = geometric_time(mdp.gamma(), horizon - 1, rng);
    let mut s = mdp.sample_initial(rng);
    let mut a = policy.sample_action(s, rng);
    for _ in 0..t {
        s = mdp.sample_next(s, a, rng);
        a = policy.sample_action(s, rng);
    }
    (s, a)
}

fn geometric_time<R: Rng + ?Sized>(gamma: f64, cap: usize, rng: &mut R) -> usize {
    if gamma == 0.0 || cap == 0 {
        return 0;
    }
    // P(t >= n) = gamma^n
    let u: f64 = 1.0 - rng.random::<f64>();
    let t = (u.ln() / gamma.ln()).floor();
    if t >= cap as f64 {
        cap
    } else {
        t as usize
    }
}

/// Start state-action pair `(s0 ~ rho, a0 ~ pi)`.
pub fn sample_start_pair<R: Rng + ?Sized>(mdp: &CmdpSpec, policy: &SoftmaxPolicy, rng: &mut R) -> (usize, usize) {
    let s = mdp.sample_initial(rng);
    (s, policy.sample_action(s, rng))
}

/// Truncated discounted rollout return `sum_{t<H} gamma^t signal(s_t, a_t)` from `(s, a)`.
pub fn rollout_return<R: Rng + ?Sized>(
    mdp: &CmdpSpec,
    policy: &SoftmaxPolicy,
    signal: &[f64],
    (s, a): (usize, usize),
    horizon: usize,
    rng: &mut R,
) -> f64 {
    let (mut s, mut a) = (s, a);
    let mut disc = 1.0;
    let mut total = 0.0;
    for t in 0..horizon {
        total += disc * signal[mdp.idx(s, a)];
        if t + 1 < horizon {
            s = mdp.sample_next(s, a, rng);
            a = policy.sample_action(s, rng);
            disc *= mdp.gamma();
        }
    }
    total
}

/// Mean of `n_rollouts` truncated rollouts started at `(s, a)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_q_estimate(
    mdp: &CmdpSpec,
    policy: &SoftmaxPolicy,
    signal: &[f64],
    s: usize,
    a: usize,
    horizon: usize,
    n_rollouts: usize,
    stream: RngStreamSpec,
) -> f64 {
    assert!(horizon >= 1 && n_rollouts >= 1);
    let mut rng = stream.rng();
    mc_q_estimate_with(mdp, policy, signal, (s, a), horizon, n_rollouts, &mut rng)
}

pub fn mc_q_estimate_with<R: Rng + ?Sized>(
    mdp: &CmdpSpec,
    policy: &SoftmaxPolicy,
    signal: &[f64],
    start: (usize, usize),
    horizon: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> f64 {
    let total: f64 = (0..n_rollouts)
        .map(|_| rollout_return(mdp, policy, signal, start, horizon, rng))
        .sum();
    total / n_rollouts as f64
}

/// Bound `gamma^H max|signal| / (1 - gamma)` on the rollout truncation bias.
pub fn truncation_bias(gamma: f64, horizon: usize, max_abs_signal: f64) -> f64 {
    gamma.powi(horizon as i32) * max_abs_signal / (1.0 - gamma)
}
