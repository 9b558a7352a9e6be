//! Sampling primitives against independent fixed-point oracles.

use cbso::cmdp::{exact_occupancy, exact_q, mc_q_estimate, sample_occupancy_pair, truncation_bias, CmdpSpec, RandomCmdpConfig, SoftmaxPolicy};
use cbso::estimators::grad_y_g_hat;
use cbso::objectives::{Annotator, AnnotatorKind, Baseline, RlhfProblem};
use cbso::synthetic::{make_problem, GradComponent};
use cbso::{ParamVector, RngStreamSpec};

fn random_mdp(seed: u64) -> CmdpSpec {
    CmdpSpec::random(
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
    )
    .unwrap()
}

fn policy(mdp: &CmdpSpec) -> SoftmaxPolicy {
    SoftmaxPolicy::new(mdp, &ParamVector::new(vec![0.5, -0.3, 0.8, 0.1]).unwrap()).unwrap()
}

/// Q by iterating `Q <- c + gamma P pi Q` to convergence.
fn q_by_iteration(mdp: &CmdpSpec, pi: &SoftmaxPolicy, signal: &[f64]) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![0.0; ns * na];
    for _ in 0..2000 {
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| pi.prob(s, a) * q[mdp.idx(s, a)]).sum()).collect();
        q = (0..ns * na)
            .map(|i| {
                let (s, a) = (i / na, i % na);
                signal[i] + mdp.gamma() * mdp.transition_row(s, a).iter().zip(&v).map(|(p, vv)| p * vv).sum::<f64>()
            })
            .collect();
    }
    q
}

/// `(1-gamma) sum_t gamma^t Pr(s_t, a_t)` by propagating the state distribution.
fn occupancy_by_series(mdp: &CmdpSpec, pi: &SoftmaxPolicy) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut dist = mdp.initial_dist().to_vec();
    let mut occ = vec![0.0; ns * na];
    let mut w = 1.0 - g;
    for _ in 0..400 {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let m = dist[s] * pi.prob(s, a);
                occ[mdp.idx(s, a)] += w * m;
                for (s2, p) in mdp.transition_row(s, a).iter().enumerate() {
                    next[s2] += m * p;
                }
            }
        }
        dist = next;
        w *= g;
    }
    occ
}

#[test]
fn exact_q_matches_value_iteration() {
    let mdp = random_mdp(3);
    let pi = policy(&mdp);
    let oracle = q_by_iteration(&mdp, &pi, mdp.cost_table());
    let q = exact_q(&mdp, &pi, mdp.cost_table()).unwrap();
    for (a, b) in q.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn exact_occupancy_matches_series() {
    let mdp = random_mdp(4);
    let pi = policy(&mdp);
    let oracle = occupancy_by_series(&mdp, &pi);
    let d = exact_occupancy(&mdp, &pi).unwrap();
    for (a, b) in d.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn monte_carlo_q_is_unbiased_up_to_truncation() {
    let mdp = random_mdp(5);
    let pi = policy(&mdp);
    let oracle = q_by_iteration(&mdp, &pi, mdp.cost_table());
    let horizon = 30;
    let n = 20_000;
    for (s, a) in [(0, 0), (2, 1), (4, 2)] {
        let draws: Vec<f64> = (0..n)
            .map(|i| mc_q_estimate(&mdp, &pi, mdp.cost_table(), s, a, horizon, 1, RngStreamSpec::derive(1, "mcq", i, 0)))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let tol = 4.0 * (var / n as f64).sqrt() + truncation_bias(0.8, horizon, 1.0);
        assert!((mean - oracle[mdp.idx(s, a)]).abs() <= tol, "({s},{a}): {mean} vs {}", oracle[mdp.idx(s, a)]);
    }
}

#[test]
fn occupancy_sampler_frequencies() {
    let mdp = random_mdp(6);
    let pi = policy(&mdp);
    let oracle = occupancy_by_series(&mdp, &pi);
    let horizon = 60;
    let n = 50_000;
    let mut counts = vec![0usize; oracle.len()];
    for i in 0..n {
        let (s, a) = sample_occupancy_pair(&mdp, &pi, horizon, RngStreamSpec::derive(2, "occ", i, 0));
        counts[mdp.idx(s, a)] += 1;
    }
    for (c, p) in counts.iter().zip(&oracle) {
        let freq = *c as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 4.0 * se + 0.8f64.powi(horizon as i32), "{freq} vs {p}");
    }
}

#[test]
fn batch_variance_scales_inversely_with_batch_size() {
    let mdp = random_mdp(8);
    let prob = RlhfProblem {
        ref_policy: SoftmaxPolicy::new(&mdp, &ParamVector::zeros(4)).unwrap(),
        r_max: 5.0,
        beta: 0.0,
        annotator: Annotator {
            kind: AnnotatorKind::GroundTruth,
            true_reward: cbso::cmdp::LinearClippedReward::new(ParamVector::zeros(2), 5.0).unwrap(),
        },
        horizon: 20,
        n_rollouts_per_q: 1,
        baseline: Baseline::LeaveOneOut,
        eval_pairs: 1,
        x_box: None,
        mdp,
    };
    let x = ParamVector::new(vec![1.0, -0.7]).unwrap();
    let y = ParamVector::new(vec![0.2, 0.1, -0.3, 0.4]).unwrap();
    let var_at = |b: usize| {
        let draws: Vec<f64> = (0..2000)
            .map(|i| grad_y_g_hat(&prob, &x, &y, b, RngStreamSpec::derive(b as u64, "var", i, 0)).unwrap().vector.as_slice()[0])
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64
    };
    let ratio = var_at(2) / var_at(32);
    // 20% is about 4.5 standard deviations of the log variance ratio at 2000 draws each
    assert!((ratio / 16.0 - 1.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn synthetic_noise_mean_and_variance() {
    let p = make_problem("P2").unwrap();
    let (x, y) = ([0.3], [0.4]);
    let exact = p.exact_grad(GradComponent::GY, &x, &y)[0];
    let b = 16;
    let n = 20_000;
    let draws: Vec<f64> = (0..n)
        .map(|i| p.noisy_grad_batch(GradComponent::GY, &x, &y, b, RngStreamSpec::derive(0, "noise", i, 0))[0])
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let expected_var = p.noise.g * p.noise.g / b as f64;
    assert!((mean - exact).abs() <= 4.0 * (expected_var / n as f64).sqrt());
    assert!((var / expected_var - 1.0).abs() < 0.05, "{var} vs {expected_var}");
}
