//! Exact objective evaluation for the RLHF-style bilevel CMDP: the preference
//! loss `f`, the regularized inner loss `g`, the cost constraint `h`, and the
//! penalty composites `h1`, `h2`, `phi`.
//!
//! Value-type objectives are start-distribution values
//! `J(y) = E_{s0 ~ rho, a0 ~ pi_y}[Q(s0, a0)]`, so that the policy-gradient
//! identity `grad J = E_{d^pi}[score * Q] / (1 - gamma)` ties them to the
//! occupancy-sampled estimators.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{
    exact_occupancy, exact_q, sample_trajectory_with, start_value, CmdpSpec, LinearClippedReward,
    SoftmaxPolicy, Trajectory,
};
use crate::error::{Error, Result};
use crate::params::{axpy, ParamVector};
use crate::penalty::PenaltyCoefficients;
use crate::rng::RngStreamSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub d0: Trajectory,
    pub d1: Trajectory,
    pub l0: u8,
    pub l1: u8,
}

impl PreferencePair {
    pub fn new(d0: Trajectory, d1: Trajectory, l1: u8) -> Result<Self> {
        if l1 > 1 {
            return Err(Error::Config(format!("preference label must be 0 or 1, got {l1}")));
        }
        Ok(Self { d0, d1, l0: 1 - l1, l1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl ObjectiveValue {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

/// `R_x(d)`: undiscounted sum of clipped rewards along `d`.
pub fn trajectory_return(reward: &LinearClippedReward, mdp: &CmdpSpec, d: &Trajectory) -> f64 {
    d.steps.iter().map(|&(s, a)| reward.value(mdp, s, a)).sum()
}

pub fn trajectory_return_grad(reward: &LinearClippedReward, mdp: &CmdpSpec, d: &Trajectory) -> Vec<f64> {
    let mut g = vec![0.0; reward.params.dim()];
    for &(s, a) in &d.steps {
        if let Some(phi) = reward.grad(mdp, s, a) {
            axpy(&mut g, 1.0, phi);
        }
    }
    g
}

/// `P(d_a > d_b) = sigmoid(r_a - r_b)`, with `bt_prob(a, b) + bt_prob(b, a) == 1`.
pub fn bt_prob(r_a: f64, r_b: f64) -> f64 {
    let d = r_a - r_b;
    if d >= 0.0 {
        1.0 - small_tail(d)
    } else {
        small_tail(-d)
    }
}

fn small_tail(d: f64) -> f64 {
    let e = (-d).exp();
    e / (1.0 + e)
}

pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// `log P(d_a > d_b) = -softplus(r_b - r_a)`.
pub fn log_bt_prob(r_a: f64, r_b: f64) -> f64 {
    -softplus(r_b - r_a)
}

/// Negative log-likelihood of one labelled pair given returns `(R0, R1)`.
pub fn pair_loss(r0: f64, r1: f64, l1: u8) -> f64 {
    if l1 == 1 {
        -log_bt_prob(r1, r0)
    } else {
        -log_bt_prob(r0, r1)
    }
}

/// `grad_x` of [`pair_loss`]: `(sigmoid(R1 - R0) - l1) (grad R1 - grad R0)`.
pub fn pair_loss_grad(reward: &LinearClippedReward, mdp: &CmdpSpec, pair: &PreferencePair) -> Vec<f64> {
    let r0 = trajectory_return(reward, mdp, &pair.d0);
    let r1 = trajectory_return(reward, mdp, &pair.d1);
    let w = bt_prob(r1, r0) - pair.l1 as f64;
    let mut g = vec![0.0; reward.params.dim()];
    axpy(&mut g, w, &trajectory_return_grad(reward, mdp, &pair.d1));
    axpy(&mut g, -w, &trajectory_return_grad(reward, mdp, &pair.d0));
    g
}

/// Empirical preference loss over a batch of labelled pairs.
pub fn outer_loss_f(reward: &LinearClippedReward, mdp: &CmdpSpec, pairs: &[PreferencePair]) -> f64 {
    assert!(!pairs.is_empty(), "preference batch must be nonempty");
    let total: f64 = pairs
        .iter()
        .map(|p| {
            pair_loss(
                trajectory_return(reward, mdp, &p.d0),
                trajectory_return(reward, mdp, &p.d1),
                p.l1,
            )
        })
        .sum();
    total / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    /// Prefers the trajectory with the larger true return; fair coin on ties.
    GroundTruth,
    /// Samples `l1 ~ Bernoulli(sigmoid(R*(d1) - R*(d0)))`.
    BradleyTerry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotator {
    pub kind: AnnotatorKind,
    pub true_reward: LinearClippedReward,
}

impl Annotator {
    /// Probability that `d1` is labelled preferred.
    pub fn prob_prefers_d1(&self, mdp: &CmdpSpec, d0: &Trajectory, d1: &Trajectory) -> f64 {
        let r0 = trajectory_return(&self.true_reward, mdp, d0);
        let r1 = trajectory_return(&self.true_reward, mdp, d1);
        match self.kind {
            AnnotatorKind::BradleyTerry => bt_prob(r1, r0),
            AnnotatorKind::GroundTruth if r1 > r0 => 1.0,
            AnnotatorKind::GroundTruth if r1 < r0 => 0.0,
            AnnotatorKind::GroundTruth => 0.5,
        }
    }

    pub fn label<R: Rng + ?Sized>(&self, mdp: &CmdpSpec, d0: Trajectory, d1: Trajectory, rng: &mut R) -> PreferencePair {
        let p = self.prob_prefers_d1(mdp, &d0, &d1);
        let l1 = if p >= 1.0 {
            1
        } else if p <= 0.0 {
            0
        } else {
            u8::from(rng.random::<f64>() < p)
        };
        PreferencePair { d0, d1, l0: 1 - l1, l1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Mean loss of the other `B - 1` pairs; keeps the score estimator unbiased.
    #[default]
    LeaveOneOut,
}

/// The CMDP instantiation of the bilevel problem: policy `y`, reward `x`,
/// preference outer loss, KL-regularized inner loss, cost constraint.
#[derive(Debug, Clone)]
pub struct RlhfProblem {
    pub mdp: CmdpSpec,
    pub r_max: f64,
    pub beta: f64,
    pub ref_policy: SoftmaxPolicy,
    pub annotator: Annotator,
    /// Length of preference trajectories and Monte-Carlo rollouts.
    pub horizon: usize,
    pub n_rollouts_per_q: usize,
    pub baseline: Baseline,
    /// Pairs used for the fixed-stream estimate of `f` in run records.
    pub eval_pairs: usize,
    /// Optional per-coordinate box on the reward parameters `x`.
    pub x_box: Option<Vec<(f64, f64)>>,
}

impl RlhfProblem {
    pub fn reward(&self, x: &ParamVector) -> Result<LinearClippedReward> {
        if x.dim() != self.mdp.reward_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.mdp.reward_dim(),
                got: x.dim(),
            });
        }
        LinearClippedReward::new(x.clone(), self.r_max)
    }

    pub fn policy(&self, y: &ParamVector) -> Result<SoftmaxPolicy> {
        SoftmaxPolicy::new(&self.mdp, y)
    }

    /// Per-pair signal `r_x(s,a) + beta log(pi_y / pi_ref)(a|s)`; `g = -J[signal]`.
    pub fn inner_signal(&self, reward: &LinearClippedReward, policy: &SoftmaxPolicy) -> Vec<f64> {
        let mut u = reward.table(&self.mdp);
        if self.beta != 0.0 {
            for (v, k) in u.iter_mut().zip(kl_signal(&self.mdp, policy, &self.ref_policy)) {
                *v += self.beta * k;
            }
        }
        u
    }

    pub fn g_exact(&self, x: &ParamVector, y: &ParamVector) -> Result<f64> {
        inner_g_exact(&self.reward(x)?, &self.policy(y)?, &self.mdp, self.beta, &self.ref_policy)
    }

    pub fn h_exact(&self, y: &ParamVector) -> Result<f64> {
        constraint_h_exact(&self.policy(y)?, &self.mdp)
    }

    /// Discounted start value of the annotator's hidden reward under `pi_y`.
    pub fn true_value(&self, y: &ParamVector) -> Result<f64> {
        let pi = self.policy(y)?;
        let q = exact_q(&self.mdp, &pi, &self.annotator.true_reward.table(&self.mdp))?;
        Ok(start_value(&self.mdp, &pi, &q))
    }

    /// Draws `n` labelled pairs `d0, d1 ~ pi_y`, pair `i` from `stream.child(i)`.
    pub fn sample_pairs(&self, policy: &SoftmaxPolicy, n: usize, stream: RngStreamSpec) -> Vec<PreferencePair> {
        (0..n)
            .map(|i| {
                let mut rng = stream.child(i as u64).rng();
                self.sample_pair_with(policy, &mut rng)
            })
            .collect()
    }

    pub fn sample_pair_with<R: Rng + ?Sized>(&self, policy: &SoftmaxPolicy, rng: &mut R) -> PreferencePair {
        let d0 = sample_trajectory_with(&self.mdp, policy, self.horizon, rng);
        let d1 = sample_trajectory_with(&self.mdp, policy, self.horizon, rng);
        self.annotator.label(&self.mdp, d0, d1, rng)
    }

    /// Monte-Carlo estimate of `f(x, y)` over `eval_pairs` pairs of a fixed stream.
    pub fn f_estimate(&self, x: &ParamVector, y: &ParamVector, stream: RngStreamSpec) -> Result<f64> {
        let reward = self.reward(x)?;
        let pairs = self.sample_pairs(&self.policy(y)?, self.eval_pairs.max(1), stream);
        Ok(outer_loss_f(&reward, &self.mdp, &pairs))
    }

    /// Exact `f(x, y)` by enumerating every length-`horizon` trajectory pair.
    pub fn f_exact_enumerated(&self, x: &ParamVector, y: &ParamVector) -> Result<f64> {
        let reward = self.reward(x)?;
        let trajs = enumerate_trajectories(&self.mdp, &self.policy(y)?, self.horizon);
        let mut total = 0.0;
        for (d0, p0) in &trajs {
            let r0 = trajectory_return(&reward, &self.mdp, d0);
            for (d1, p1) in &trajs {
                let r1 = trajectory_return(&reward, &self.mdp, d1);
                let q = self.annotator.prob_prefers_d1(&self.mdp, d0, d1);
                let loss = q * pair_loss(r0, r1, 1) + (1.0 - q) * pair_loss(r0, r1, 0);
                total += p0 * p1 * loss;
            }
        }
        Ok(total)
    }

    /// Exact `grad_x f(x, y)` by enumeration: `(sigmoid(R1 - R0) - q) (grad R1 - grad R0)`
    /// averaged over trajectory pairs, `q` the annotator's preference probability.
    pub fn grad_x_f_exact_enumerated(&self, x: &ParamVector, y: &ParamVector) -> Result<Vec<f64>> {
        let reward = self.reward(x)?;
        let trajs = enumerate_trajectories(&self.mdp, &self.policy(y)?, self.horizon);
        let info: Vec<(f64, Vec<f64>)> = trajs
            .iter()
            .map(|(d, _)| (trajectory_return(&reward, &self.mdp, d), trajectory_return_grad(&reward, &self.mdp, d)))
            .collect();
        let mut g = vec![0.0; x.dim()];
        for (i, (d0, p0)) in trajs.iter().enumerate() {
            for (j, (d1, p1)) in trajs.iter().enumerate() {
                let q = self.annotator.prob_prefers_d1(&self.mdp, d0, d1);
                let w = p0 * p1 * (bt_prob(info[j].0, info[i].0) - q);
                axpy(&mut g, w, &info[j].1);
                axpy(&mut g, -w, &info[i].1);
            }
        }
        Ok(g)
    }

    /// Sup-norm bounds `(C_f, C_g)` over all parameters: a pair loss is at most
    /// `softplus(2 H R)`, and `|g| <= (R + beta * max|log ratio|) / (1 - gamma)`
    /// with the log ratio bounded over deterministic limits of both policies.
    pub fn sup_bounds(&self) -> (f64, f64) {
        let c_f = softplus(2.0 * self.horizon as f64 * self.r_max);
        let min_ref = (0..self.mdp.n_states())
            .flat_map(|s| (0..self.mdp.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| self.ref_policy.log_prob(s, a))
            .fold(0.0f64, f64::min);
        let c_g = (self.r_max + self.beta.abs() * (-min_ref).max(0.0)) / (1.0 - self.mdp.gamma());
        (c_f, c_g)
    }
}

/// `log pi_y(a|s) - log pi_ref(a|s)` per state-action pair.
pub fn kl_signal(mdp: &CmdpSpec, policy: &SoftmaxPolicy, reference: &SoftmaxPolicy) -> Vec<f64> {
    let mut k = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            k[mdp.idx(s, a)] = policy.log_prob(s, a) - reference.log_prob(s, a);
        }
    }
    k
}

/// `g = -J[r_x] - beta J[log(pi_y / pi_ref)]`.
pub fn inner_g_exact(
    reward: &LinearClippedReward,
    policy: &SoftmaxPolicy,
    mdp: &CmdpSpec,
    beta: f64,
    reference: &SoftmaxPolicy,
) -> Result<f64> {
    let q_r = exact_q(mdp, policy, &reward.table(mdp))?;
    let mut g = -start_value(mdp, policy, &q_r);
    if beta != 0.0 {
        let q_k = exact_q(mdp, policy, &kl_signal(mdp, policy, reference))?;
        g -= beta * start_value(mdp, policy, &q_k);
    }
    Ok(g)
}

/// `h(y) = J[c]`.
pub fn constraint_h_exact(policy: &SoftmaxPolicy, mdp: &CmdpSpec) -> Result<f64> {
    let q = exact_q(mdp, policy, mdp.cost_table())?;
    Ok(start_value(mdp, policy, &q))
}

/// `grad_y J[signal]` for a signal that does not depend on `y`.
pub fn exact_policy_gradient(mdp: &CmdpSpec, policy: &SoftmaxPolicy, signal: &[f64]) -> Result<Vec<f64>> {
    let q = exact_q(mdp, policy, signal)?;
    let d = exact_occupancy(mdp, policy)?;
    let mut g = vec![0.0; mdp.policy_dim()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let i = mdp.idx(s, a);
            axpy(&mut g, d[i] * q[i] / (1.0 - mdp.gamma()), policy.score(s, a));
        }
    }
    Ok(g)
}

/// `grad_x g = -E[sum_t gamma^t grad_x r_x(s_t, a_t)]`.
pub fn grad_x_g_exact(reward: &LinearClippedReward, policy: &SoftmaxPolicy, mdp: &CmdpSpec) -> Result<Vec<f64>> {
    let d = exact_occupancy(mdp, policy)?;
    let mut g = vec![0.0; reward.params.dim()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            if let Some(phi) = reward.grad(mdp, s, a) {
                axpy(&mut g, -d[mdp.idx(s, a)] / (1.0 - mdp.gamma()), phi);
            }
        }
    }
    Ok(g)
}

/// Every length-`horizon` trajectory with its probability under `policy`.
pub fn enumerate_trajectories(mdp: &CmdpSpec, policy: &SoftmaxPolicy, horizon: usize) -> Vec<(Trajectory, f64)> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<(usize, usize)>, f64)> = Vec::new();
    for s in 0..mdp.n_states() {
        let p = mdp.initial_dist()[s];
        if p > 0.0 {
            for a in 0..mdp.n_actions() {
                stack.push((vec![(s, a)], p * policy.prob(s, a)));
            }
        }
    }
    while let Some((steps, p)) = stack.pop() {
        if steps.len() == horizon {
            let mut accum = vec![0.0; mdp.policy_dim()];
            for &(s, a) in &steps {
                axpy(&mut accum, 1.0, policy.score(s, a));
            }
            out.push((
                Trajectory {
                    steps,
                    log_prob_grad_accum: accum,
                },
                p,
            ));
            continue;
        }
        let (s, a) = *steps.last().unwrap();
        for (s2, ps) in mdp.transition_row(s, a).iter().enumerate() {
            if *ps == 0.0 {
                continue;
            }
            for a2 in 0..mdp.n_actions() {
                let mut next = steps.clone();
                next.push((s2, a2));
                stack.push((next, p * ps * policy.prob(s2, a2)));
            }
        }
    }
    out
}

/// `h1 = f + (g + h+ / sigma3) / sigma1`.
pub fn h1_value(f: f64, g: f64, h_plus: f64, coeffs: &PenaltyCoefficients) -> ObjectiveValue {
    let value = f + (g + h_plus / coeffs.sigma3()) / coeffs.sigma1();
    ObjectiveValue {
        value,
        components: BTreeMap::from([("f".into(), f), ("g".into(), g), ("hinge".into(), h_plus)]),
    }
}

/// `h2 = g + h+ / sigma2`.
pub fn h2_value(g: f64, h_plus: f64, coeffs: &PenaltyCoefficients) -> ObjectiveValue {
    ObjectiveValue {
        value: g + h_plus / coeffs.sigma2(),
        components: BTreeMap::from([("g".into(), g), ("hinge".into(), h_plus)]),
    }
}

/// `phi = h1 - h2 / sigma1`.
pub fn phi_value(h1: &ObjectiveValue, h2: &ObjectiveValue, coeffs: &PenaltyCoefficients) -> f64 {
    h1.value - h2.value / coeffs.sigma1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::RandomCmdpConfig;
    use crate::penalty::{hinge, validate_penalty_coefficients};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn small() -> CmdpSpec {
        CmdpSpec::random(
            &RandomCmdpConfig {
                n_states: 3,
                n_actions: 2,
                reward_dim: 2,
                policy_dim: 2,
                gamma: 0.6,
                c0: 0.5,
                cost_bound: 1.0,
            },
            11,
        )
        .unwrap()
    }

    fn traj(steps: Vec<(usize, usize)>) -> Trajectory {
        Trajectory {
            steps,
            log_prob_grad_accum: vec![],
        }
    }

    #[test]
    fn bt_prob_examples() {
        assert_eq!(bt_prob(0.0, 0.0), 0.5);
        assert!((bt_prob(1.0, 0.0) - 0.7310585786300049).abs() < 1e-15);
        let p = bt_prob(700.0, 0.0);
        assert!(p.is_finite() && (p - 1.0).abs() < 1e-300);
        assert_eq!(bt_prob(-800.0, 0.0) + bt_prob(0.0, -800.0), 1.0);
    }

    #[test]
    fn loss_examples() {
        let mdp = small();
        let zero = LinearClippedReward::new(pv(&[0.0, 0.0]), 1.0).unwrap();
        let pair = PreferencePair::new(traj(vec![(0, 0), (1, 1)]), traj(vec![(2, 1), (0, 0)]), 1).unwrap();
        assert!((outer_loss_f(&zero, &mdp, &[pair.clone(), pair]) - 2f64.ln()).abs() < 1e-15);
        assert!((pair_loss(0.0, 10.0, 1) - (-10f64).exp().ln_1p()).abs() < 1e-19);
        assert!((pair_loss(0.0, 10.0, 1) - 4.5398899e-5).abs() < 1e-11);
    }

    #[test]
    fn trajectory_return_matches_manual_sum() {
        let mdp = small();
        let reward = LinearClippedReward::new(pv(&[0.7, -0.4]), 0.5).unwrap();
        let d = traj(vec![(0, 1), (2, 0), (1, 1), (1, 0), (0, 0)]);
        let mut manual = 0.0;
        for &(s, a) in &d.steps {
            let f = mdp.reward_features(s, a);
            manual += (0.7 * f[0] - 0.4 * f[1]).clamp(-0.5, 0.5);
        }
        assert!((trajectory_return(&reward, &mdp, &d) - manual).abs() < 1e-15);
        let zero = LinearClippedReward::new(pv(&[0.0, 0.0]), 0.5).unwrap();
        assert_eq!(trajectory_return(&zero, &mdp, &d), 0.0);
    }

    #[test]
    fn pair_gradient_matches_finite_difference() {
        let mdp = small();
        let pair = PreferencePair::new(traj(vec![(0, 1), (2, 0)]), traj(vec![(1, 1), (0, 0)]), 0).unwrap();
        let x = [0.3, -0.2];
        let reward = LinearClippedReward::new(pv(&x), 5.0).unwrap();
        let g = pair_loss_grad(&reward, &mdp, &pair);
        for i in 0..2 {
            let eps = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += eps;
            xm[i] -= eps;
            let lp = outer_loss_f(&LinearClippedReward::new(pv(&xp), 5.0).unwrap(), &mdp, std::slice::from_ref(&pair));
            let lm = outer_loss_f(&LinearClippedReward::new(pv(&xm), 5.0).unwrap(), &mdp, std::slice::from_ref(&pair));
            assert!((g[i] - (lp - lm) / (2.0 * eps)).abs() < 1e-8);
        }
    }

    #[test]
    fn constraint_examples() {
        let base = small();
        let mut def = base.definition();
        def.cost = vec![0.0; 6];
        def.gamma = 0.5;
        let mdp = CmdpSpec::new(def.clone()).unwrap();
        let pi = SoftmaxPolicy::new(&mdp, &pv(&[0.3, 0.1])).unwrap();
        assert_eq!(constraint_h_exact(&pi, &mdp).unwrap(), 0.0);
        assert_eq!(hinge(0.0, 1.0), 0.0);
        def.cost = vec![1.0; 6];
        let mdp = CmdpSpec::new(def).unwrap();
        let h = constraint_h_exact(&pi, &mdp).unwrap();
        assert!((h - 2.0).abs() < 1e-12);
        assert!((hinge(h, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inner_g_examples() {
        let mdp = small();
        let y = pv(&[0.4, -0.3]);
        let pi = SoftmaxPolicy::new(&mdp, &y).unwrap();
        let zero = LinearClippedReward::new(pv(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(inner_g_exact(&zero, &pi, &mdp, 0.7, &pi).unwrap(), 0.0);
        let reward = LinearClippedReward::new(pv(&[0.5, 0.9]), 1.0).unwrap();
        let q = exact_q(&mdp, &pi, &reward.table(&mdp)).unwrap();
        let reference = SoftmaxPolicy::new(&mdp, &pv(&[0.0, 0.0])).unwrap();
        assert_eq!(
            inner_g_exact(&reward, &pi, &mdp, 0.0, &reference).unwrap(),
            -start_value(&mdp, &pi, &q)
        );
    }

    #[test]
    fn composite_examples() {
        let c = validate_penalty_coefficients(0.5, 0.25, 1.0, 0.0).unwrap();
        let h1 = h1_value(1.0, 2.0, 0.5, &c);
        assert!((h1.value - 6.0).abs() < 1e-15);
        let h2 = h2_value(2.0, 0.5, &c);
        assert!((h2.value - 4.0).abs() < 1e-15);
        assert!((phi_value(&h1, &h2, &c) + 2.0).abs() < 1e-15);
        let zero1 = h1_value(0.0, 0.0, 0.0, &c);
        let zero2 = h2_value(0.0, 0.0, &c);
        assert_eq!((zero1.value, zero2.value), (0.0, 0.0));
        let c = validate_penalty_coefficients(0.5, 0.25, 1.0, 0.0).unwrap();
        let a = ObjectiveValue { value: 2.0, components: BTreeMap::new() };
        let b = ObjectiveValue { value: 1.0, components: BTreeMap::new() };
        assert_eq!(phi_value(&a, &b, &c), 0.0);
    }

    #[test]
    fn enumerated_f_is_log2_at_zero_reward() {
        let mdp = small();
        let truth = LinearClippedReward::new(pv(&[1.0, 0.0]), 1.0).unwrap();
        let prob = RlhfProblem {
            ref_policy: SoftmaxPolicy::new(&mdp, &pv(&[0.0, 0.0])).unwrap(),
            mdp,
            r_max: 1.0,
            beta: 0.0,
            annotator: Annotator {
                kind: AnnotatorKind::BradleyTerry,
                true_reward: truth,
            },
            horizon: 2,
            n_rollouts_per_q: 1,
            baseline: Baseline::LeaveOneOut,
            eval_pairs: 16,
            x_box: None,
        };
        let f = prob.f_exact_enumerated(&pv(&[0.0, 0.0]), &pv(&[0.2, 0.1])).unwrap();
        assert!((f - 2f64.ln()).abs() < 1e-12);
        let total: f64 = enumerate_trajectories(&prob.mdp, &prob.policy(&pv(&[0.2, 0.1])).unwrap(), 3)
            .iter()
            .map(|(_, p)| p)
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumerated_grad_x_f_matches_finite_difference() {
        let mdp = small();
        let prob = RlhfProblem {
            ref_policy: SoftmaxPolicy::new(&mdp, &pv(&[0.0, 0.0])).unwrap(),
            mdp,
            r_max: 5.0,
            beta: 0.0,
            annotator: Annotator {
                kind: AnnotatorKind::BradleyTerry,
                true_reward: LinearClippedReward::new(pv(&[1.0, -0.5]), 5.0).unwrap(),
            },
            horizon: 2,
            n_rollouts_per_q: 1,
            baseline: Baseline::LeaveOneOut,
            eval_pairs: 16,
            x_box: None,
        };
        let (x, y) = ([0.3, 0.4], pv(&[0.2, -0.1]));
        let g = prob.grad_x_f_exact_enumerated(&pv(&x), &y).unwrap();
        for i in 0..2 {
            let eps = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (prob.f_exact_enumerated(&pv(&xp), &y).unwrap() - prob.f_exact_enumerated(&pv(&xm), &y).unwrap()) / (2.0 * eps);
            assert!((g[i] - fd).abs() < 1e-7, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn exact_policy_gradient_matches_finite_difference() {
        let mdp = small();
        let y = [0.3, -0.6];
        let pi = SoftmaxPolicy::new(&mdp, &pv(&y)).unwrap();
        let g = exact_policy_gradient(&mdp, &pi, mdp.cost_table()).unwrap();
        for i in 0..2 {
            let eps = 1e-6;
            let mut yp = y;
            let mut ym = y;
            yp[i] += eps;
            ym[i] -= eps;
            let hp = constraint_h_exact(&SoftmaxPolicy::new(&mdp, &pv(&yp)).unwrap(), &mdp).unwrap();
            let hm = constraint_h_exact(&SoftmaxPolicy::new(&mdp, &pv(&ym)).unwrap(), &mdp).unwrap();
            assert!((g[i] - (hp - hm) / (2.0 * eps)).abs() < 1e-7, "{i}: {} vs {}", g[i], (hp - hm) / (2.0 * eps));
        }
    }

    #[test]
    fn h1_x_gradient_ignores_sigma3() {
        let mdp = small();
        let x = pv(&[0.2, 0.4]);
        let pi = SoftmaxPolicy::new(&mdp, &pv(&[0.1, 0.1])).unwrap();
        let reward = LinearClippedReward::new(x, 1.0).unwrap();
        let gx = grad_x_g_exact(&reward, &pi, &mdp).unwrap();
        let a = validate_penalty_coefficients(0.5, 0.1, 1.0, 0.0).unwrap();
        let b = validate_penalty_coefficients(0.5, 0.1, 7.0, 0.0).unwrap();
        let grad = |c: &PenaltyCoefficients| -> Vec<f64> { gx.iter().map(|v| v / c.sigma1()).collect() };
        assert_eq!(grad(&a), grad(&b));
    }

    proptest! {
        #[test]
        fn bt_complement_exact(a in -1e3..1e3f64, b in -1e3..1e3f64) {
            prop_assert_eq!(bt_prob(a, b) + bt_prob(b, a), 1.0);
            let p = bt_prob(a, b);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn pair_loss_nonnegative(r0 in -50.0..50.0f64, r1 in -50.0..50.0f64, l1 in 0u8..2) {
            prop_assert!(pair_loss(r0, r1, l1) >= 0.0);
            prop_assert!((pair_loss(r0, r0, l1) - 2f64.ln()).abs() < 1e-15);
        }

        #[test]
        fn composite_recombination(f in -5.0..5.0f64, g in -5.0..5.0f64, hp in 0.0..5.0f64, s1 in 0.05..2.0f64, s2 in 0.05..2.0f64) {
            let c = validate_penalty_coefficients(s1, s2, s2 * 3.0, 0.0).unwrap();
            let h1 = h1_value(f, g, hp, &c);
            let re = h1.component("f") + (h1.component("g") + h1.component("hinge") / c.sigma3()) / c.sigma1();
            prop_assert!((h1.value - re).abs() <= 1e-12 * (1.0 + re.abs()));
            let h2 = h2_value(g, hp, &c);
            let re = h2.component("g") + h2.component("hinge") / c.sigma2();
            prop_assert!((h2.value - re).abs() <= 1e-12 * (1.0 + re.abs()));
        }
    }
}
