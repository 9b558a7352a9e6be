//! Monte-Carlo (sub)gradient estimators for the CMDP bilevel problem and the
//! penalty-weighted combinations used by the inner and outer updates.
//!
//! Sample `i` of a batch always draws from `stream.child(i)`, and batch sums
//! run in index order, so results do not depend on thread scheduling.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cmdp::{mc_q_estimate_with, sample_occupancy_pair_with, sample_start_pair, sample_trajectory_with};
use crate::error::{Error, Result};
use crate::objectives::{outer_loss_f, pair_loss_grad, Baseline, PreferencePair, RlhfProblem};
use crate::params::{axpy, ParamVector};
use crate::penalty::PenaltyCoefficients;
use crate::rng::RngStreamSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgradientSample {
    pub vector: ParamVector,
    pub batch_size: usize,
    pub horizon: usize,
    /// Hinge indicator used, when a hinge term is part of the estimate.
    pub tau: Option<f64>,
    pub n_rollouts_per_q: usize,
    /// Batch estimate of the differentiated objective.
    pub value: f64,
}

impl SubgradientSample {
    fn new(vector: Vec<f64>, batch_size: usize, horizon: usize, n_rollouts_per_q: usize, value: f64) -> Result<Self> {
        Ok(Self {
            vector: ParamVector::new(vector)?,
            batch_size,
            horizon,
            tau: None,
            n_rollouts_per_q,
            value,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            vector: ParamVector::zeros(dim),
            batch_size: 0,
            horizon: 0,
            tau: None,
            n_rollouts_per_q: 0,
            value: 0.0,
        }
    }
}

/// `tau(h_hat)` of the Clarke selection: 1 above `c0`, 0 below, 1/2 on equality.
pub fn clarke_tau(h_hat: f64, c0: f64) -> f64 {
    if h_hat > c0 {
        1.0
    } else if h_hat < c0 {
        0.0
    } else {
        0.5
    }
}

pub(crate) fn check_batch(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(())
}

/// Runs `f` on samples `0..n`, sample `i` owning the rng of `stream.child(i)`.
pub fn per_sample<T, F>(n: usize, stream: RngStreamSpec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| f(i, &mut stream.child(i as u64).rng()))
        .collect()
}

/// Index-ordered mean of equal-length vectors.
pub fn mean_vector(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for r in rows {
        axpy(&mut acc, 1.0, r);
    }
    let n = rows.len().max(1) as f64;
    acc.iter().map(|v| v / n).collect()
}

struct PairTerm {
    loss: f64,
    score: Vec<f64>,
}

/// Score-function estimate of `grad_y f`: `(1/B) sum_i (l_i - b_i) (grad log p(d0) + grad log p(d1))`.
pub fn grad_y_f_hat(
    prob: &RlhfProblem,
    x: &ParamVector,
    y: &ParamVector,
    b: usize,
    stream: RngStreamSpec,
) -> Result<SubgradientSample> {
    check_batch(b)?;
    let reward = prob.reward(x)?;
    let policy = prob.policy(y)?;
    let terms = per_sample(b, stream, |_, rng| {
        let pair = prob.sample_pair_with(&policy, rng);
        let loss = outer_loss_f(&reward, &prob.mdp, std::slice::from_ref(&pair));
        let mut score = pair.d0.log_prob_grad_accum.clone();
        axpy(&mut score, 1.0, &pair.d1.log_prob_grad_accum);
        PairTerm { loss, score }
    });
    let total: f64 = terms.iter().map(|t| t.loss).sum();
    let mut v = vec![0.0; y.dim()];
    for t in &terms {
        let base = match prob.baseline {
            Baseline::LeaveOneOut if b > 1 => (total - t.loss) / (b - 1) as f64,
            _ => 0.0,
        };
        axpy(&mut v, (t.loss - base) / b as f64, &t.score);
    }
    SubgradientSample::new(v, b, prob.horizon, 0, total / b as f64)
}

/// Exact pathwise gradient of the batch preference loss in `x`.
pub fn grad_x_f_hat(prob: &RlhfProblem, x: &ParamVector, pairs: &[PreferencePair]) -> Result<SubgradientSample> {
    check_batch(pairs.len())?;
    let reward = prob.reward(x)?;
    let rows: Vec<Vec<f64>> = pairs.iter().map(|p| pair_loss_grad(&reward, &prob.mdp, p)).collect();
    let v = mean_vector(&rows, x.dim());
    SubgradientSample::new(v, pairs.len(), prob.horizon, 0, outer_loss_f(&reward, &prob.mdp, pairs))
}

/// Samples `b` pairs from `pi_y` and differentiates the batch loss in `x`.
pub fn grad_x_f_hat_sampled(
    prob: &RlhfProblem,
    x: &ParamVector,
    y: &ParamVector,
    b: usize,
    stream: RngStreamSpec,
) -> Result<SubgradientSample> {
    check_batch(b)?;
    let policy = prob.policy(y)?;
    let pairs = per_sample(b, stream, |_, rng| prob.sample_pair_with(&policy, rng));
    grad_x_f_hat(prob, x, &pairs)
}

/// One sample of the `grad_y g` estimator: the occupancy score term scaled by
/// `-1/(1-gamma)`, the pathwise log-ratio term, and the trajectory's
/// discounted signal (the value estimate).
#[derive(Debug, Clone)]
pub struct GTerm {
    pub grad: Vec<f64>,
    pub value: f64,
}

pub fn grad_y_g_terms(
    prob: &RlhfProblem,
    x: &ParamVector,
    y: &ParamVector,
    n: usize,
    stream: RngStreamSpec,
) -> Result<Vec<GTerm>> {
    let reward = prob.reward(x)?;
    let policy = prob.policy(y)?;
    let mdp = &prob.mdp;
    let signal = prob.inner_signal(&reward, &policy);
    let (h, nq, gamma) = (prob.horizon, prob.n_rollouts_per_q.max(1), mdp.gamma());
    Ok(per_sample(n, stream, |_, rng| {
        let (s, a) = sample_occupancy_pair_with(mdp, &policy, h, rng);
        let q = mc_q_estimate_with(mdp, &policy, &signal, (s, a), h, nq, rng);
        let mut grad = vec![0.0; y.dim()];
        axpy(&mut grad, -q / (1.0 - gamma), policy.score(s, a));
        let traj = sample_trajectory_with(mdp, &policy, h, rng);
        let mut disc = 1.0;
        let mut value = 0.0;
        for &(s, a) in &traj.steps {
            value -= disc * signal[mdp.idx(s, a)];
            if prob.beta != 0.0 {
                axpy(&mut grad, -prob.beta * disc, policy.score(s, a));
            }
            disc *= gamma;
        }
        GTerm { grad, value }
    }))
}

/// `-(1/B) sum_i score(s_i,a_i) Q_hat(s_i,a_i) / (1-gamma) - (beta/B) sum_j sum_{i<H} gamma^i grad_y log(pi_y/pi_ref)`,
/// with `Q_hat` the rollout estimate of the regularized signal.
pub fn grad_y_g_hat(
    prob: &RlhfProblem,
    x: &ParamVector,
    y: &ParamVector,
    b: usize,
    stream: RngStreamSpec,
) -> Result<SubgradientSample> {
    check_batch(b)?;
    let terms = grad_y_g_terms(prob, x, y, b, stream)?;
    let grads: Vec<Vec<f64>> = terms.iter().map(|t| t.grad.clone()).collect();
    let value = terms.iter().map(|t| t.value).sum::<f64>() / b as f64;
    SubgradientSample::new(mean_vector(&grads, y.dim()), b, prob.horizon, prob.n_rollouts_per_q.max(1), value)
}

/// One sample of the constraint estimator: `Q_hat_c` at a start pair (for
/// `h_hat`) and `score * Q_hat_c / (1 - gamma)` at an occupancy pair.
#[derive(Debug, Clone)]
pub struct HTerm {
    pub h: f64,
    pub grad: Vec<f64>,
}

pub fn constraint_terms(prob: &RlhfProblem, y: &ParamVector, n: usize, stream: RngStreamSpec) -> Result<Vec<HTerm>> {
    let policy = prob.policy(y)?;
    let mdp = &prob.mdp;
    let cost = mdp.cost_table();
    let (h, nq, gamma) = (prob.horizon, prob.n_rollouts_per_q.max(1), mdp.gamma());
    Ok(per_sample(n, stream, |_, rng| {
        let start = sample_start_pair(mdp, &policy, rng);
        let h_i = mc_q_estimate_with(mdp, &policy, cost, start, h, nq, rng);
        let (s, a) = sample_occupancy_pair_with(mdp, &policy, h, rng);
        let q = mc_q_estimate_with(mdp, &policy, cost, (s, a), h, nq, rng);
        let mut grad = vec![0.0; y.dim()];
        axpy(&mut grad, q / (1.0 - gamma), policy.score(s, a));
        HTerm { h: h_i, grad }
    }))
}

/// Batch estimate `h_hat(y)` alone.
pub fn h_hat(prob: &RlhfProblem, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<f64> {
    check_batch(b)?;
    let terms = constraint_terms(prob, y, b, stream)?;
    Ok(terms.iter().map(|t| t.h).sum::<f64>() / b as f64)
}

/// `tau(h_hat) (1/B) sum_i score Q_hat_c / (1-gamma)`; `value` is `max(h_hat - c0, 0)`.
pub fn subgrad_y_hplus_hat(
    prob: &RlhfProblem,
    y: &ParamVector,
    b: usize,
    c0: f64,
    stream: RngStreamSpec,
) -> Result<SubgradientSample> {
    check_batch(b)?;
    let terms = constraint_terms(prob, y, b, stream)?;
    let h = terms.iter().map(|t| t.h).sum::<f64>() / b as f64;
    let tau = clarke_tau(h, c0);
    let grads: Vec<Vec<f64>> = terms.into_iter().map(|t| t.grad).collect();
    let v: Vec<f64> = mean_vector(&grads, y.dim()).iter().map(|g| tau * g).collect();
    let mut out = SubgradientSample::new(v, b, prob.horizon, prob.n_rollouts_per_q.max(1), (h - c0).max(0.0))?;
    out.tau = Some(tau);
    Ok(out)
}

/// Per-trajectory `-sum_{i<H} gamma^i grad_x r_x(s_i, a_i)`.
pub fn grad_x_g_terms(
    prob: &RlhfProblem,
    x: &ParamVector,
    y: &ParamVector,
    n: usize,
    stream: RngStreamSpec,
) -> Result<Vec<GTerm>> {
    let reward = prob.reward(x)?;
    let policy = prob.policy(y)?;
    let mdp = &prob.mdp;
    let signal = prob.inner_signal(&reward, &policy);
    Ok(per_sample(n, stream, |_, rng| {
        let traj = sample_trajectory_with(mdp, &policy, prob.horizon, rng);
        let mut grad = vec![0.0; x.dim()];
        let mut value = 0.0;
        let mut disc = 1.0;
        for &(s, a) in &traj.steps {
            if let Some(phi) = reward.grad(mdp, s, a) {
                axpy(&mut grad, -disc, phi);
            }
            value -= disc * signal[mdp.idx(s, a)];
            disc *= mdp.gamma();
        }
        GTerm { grad, value }
    }))
}

pub fn grad_x_g_hat(
    prob: &RlhfProblem,
    x: &ParamVector,
    y: &ParamVector,
    b: usize,
    stream: RngStreamSpec,
) -> Result<SubgradientSample> {
    check_batch(b)?;
    let terms = grad_x_g_terms(prob, x, y, b, stream)?;
    let grads: Vec<Vec<f64>> = terms.iter().map(|t| t.grad.clone()).collect();
    let value = terms.iter().map(|t| t.value).sum::<f64>() / b as f64;
    SubgradientSample::new(mean_vector(&grads, x.dim()), b, prob.horizon, 0, value)
}

fn combine(parts: &[(f64, &SubgradientSample)]) -> Result<SubgradientSample> {
    let dim = parts[0].1.vector.dim();
    let mut v = vec![0.0; dim];
    let mut value = 0.0;
    for (w, s) in parts {
        if s.vector.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.vector.dim(),
            });
        }
        axpy(&mut v, *w, s.vector.as_slice());
        value += w * s.value;
    }
    let first = parts[0].1;
    Ok(SubgradientSample {
        vector: ParamVector::new(v)?,
        batch_size: parts.iter().map(|p| p.1.batch_size).max().unwrap_or(0),
        horizon: first.horizon.max(parts.iter().map(|p| p.1.horizon).max().unwrap_or(0)),
        tau: parts.iter().find_map(|p| p.1.tau),
        n_rollouts_per_q: parts.iter().map(|p| p.1.n_rollouts_per_q).max().unwrap_or(0),
        value,
    })
}

/// `d_y h1 = d_y f + (d_y g + d_y h+ / sigma3) / sigma1`.
pub fn combine_h1(
    f: &SubgradientSample,
    g: &SubgradientSample,
    h_plus: &SubgradientSample,
    coeffs: &PenaltyCoefficients,
) -> Result<SubgradientSample> {
    let s1 = coeffs.sigma1();
    combine(&[(1.0, f), (1.0 / s1, g), (1.0 / (s1 * coeffs.sigma3()), h_plus)])
}

/// `d_y h2 = d_y g + d_y h+ / sigma2`.
pub fn combine_h2(g: &SubgradientSample, h_plus: &SubgradientSample, coeffs: &PenaltyCoefficients) -> Result<SubgradientSample> {
    combine(&[(1.0, g), (1.0 / coeffs.sigma2(), h_plus)])
}

/// `d_x phi = (d_x f(y) + d_x g(y) / sigma1) - d_x g(z) / sigma1`.
pub fn combine_phi_x(
    f_x: &SubgradientSample,
    g_x_y: &SubgradientSample,
    g_x_z: &SubgradientSample,
    coeffs: &PenaltyCoefficients,
) -> Result<SubgradientSample> {
    let s1 = coeffs.sigma1();
    combine(&[(1.0, f_x), (1.0 / s1, g_x_y), (-1.0 / s1, g_x_z)])
}

/// Analytic bias bound, per component, of the occupancy-score estimators with
/// horizon `h`: the rollout truncation `gamma^H max|signal| / (1-gamma)` plus
/// the mass `gamma^H` folded onto the last step of the occupancy draw, both
/// scaled by `max|score| / (1-gamma)`.
pub fn score_estimator_bias(gamma: f64, horizon: usize, max_abs_signal: f64, max_abs_score: f64) -> f64 {
    let gh = gamma.powi(horizon as i32);
    let q_max = max_abs_signal / (1.0 - gamma);
    max_abs_score / (1.0 - gamma) * (gh * q_max + 2.0 * gh * q_max)
}
