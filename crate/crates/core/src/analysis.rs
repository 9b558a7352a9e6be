//! Numerical verification: Moreau-envelope probes, weak-convexity and
//! envelope-property checks, indicator-mismatch rates, and log-log rate fits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{dot, norm, sub, ParamVector};
use crate::rng::RngStreamSpec;

/// A real function with a selection from its (Clarke) subdifferential.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn subgradient(&self, x: &[f64]) -> Vec<f64>;
}

pub struct FnObjective<F, G> {
    pub dim: usize,
    pub value: F,
    pub subgradient: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn subgradient(&self, x: &[f64]) -> Vec<f64> {
        (self.subgradient)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxSolverConfig {
    pub max_iters: usize,
    /// Step `k` is `step_scale * lambda / (k + 1)`.
    pub step_scale: f64,
    /// Stop once an update moves less than this.
    pub tol: f64,
    pub divergence_bound: f64,
}

impl Default for ProxSolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step_scale: 1.0,
            tol: 1e-14,
            divergence_bound: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoreauProbeResult {
    pub query_point: ParamVector,
    pub lambda: f64,
    pub prox_point: ParamVector,
    pub envelope_value: f64,
    pub envelope_grad_norm: f64,
    pub solver_iters: usize,
    pub residual: f64,
}

/// Approximates `prox_{lambda f}(x)` by subgradient descent on
/// `f(u) + |u - x|^2 / (2 lambda)` from `u = x`, keeping the best iterate.
pub fn prox_point(obj: &dyn Objective, x: &[f64], lambda: f64, cfg: &ProxSolverConfig) -> Result<MoreauProbeResult> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveCoefficient { name: "lambda", value: lambda });
    }
    let model = |u: &[f64]| obj.value(u) + dot(&sub(u, x), &sub(u, x)) / (2.0 * lambda);
    let mut u = x.to_vec();
    let mut best = (u.clone(), model(&u));
    let mut residual = 0.0;
    let mut iters = 0;
    for k in 0..cfg.max_iters {
        iters = k + 1;
        let g = obj.subgradient(&u);
        let step = cfg.step_scale * lambda / (k + 1) as f64;
        let next: Vec<f64> = u
            .iter()
            .zip(&g)
            .zip(x)
            .map(|((ui, gi), xi)| ui - step * (gi + (ui - xi) / lambda))
            .collect();
        residual = norm(&sub(&next, &u));
        let n = norm(&next);
        if !n.is_finite() || n > cfg.divergence_bound {
            return Err(Error::Diverged {
                norm: n,
                bound: cfg.divergence_bound,
            });
        }
        u = next;
        let v = model(&u);
        if v <= best.1 {
            best = (u.clone(), v);
        }
        if residual < cfg.tol {
            break;
        }
    }
    let grad_norm = norm(&sub(x, &best.0)) / lambda;
    Ok(MoreauProbeResult {
        query_point: ParamVector::new(x.to_vec())?,
        lambda,
        prox_point: ParamVector::new(best.0)?,
        envelope_value: best.1,
        envelope_grad_norm: grad_norm,
        solver_iters: iters,
        residual,
    })
}

/// Exact envelope on a sorted 1-D grid: `min_j f(x_j) + (x_i - x_j)^2 / (2 lambda)`.
pub fn dense_grid_envelope(values: &[f64], grid: &[f64], lambda: f64) -> Vec<f64> {
    grid.iter()
        .map(|xi| {
            grid.iter()
                .zip(values)
                .map(|(xj, fj)| fj + (xi - xj).powi(2) / (2.0 * lambda))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn push(&mut self, check: impl Into<String>, measured: f64, bound: f64, pass: bool) {
        self.rows.push(CheckRow {
            check: check.into(),
            measured,
            bound,
            pass,
        });
    }

    /// Adds a row passing iff `measured <= bound`.
    pub fn push_le(&mut self, check: impl Into<String>, measured: f64, bound: f64) {
        self.push(check, measured, bound, measured <= bound);
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.rows.extend(other.rows);
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("check,measured,bound,verdict\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.check,
                crate::record::fmt_float(r.measured),
                crate::record::fmt_float(r.bound),
                if r.pass { "pass" } else { "fail" }
            ));
        }
        out
    }
}

/// `f(x) - f_lambda(x) <= L^2 lambda / 2` at each sample point. The probe's
/// envelope value overestimates the true envelope, so solver error cannot
/// manufacture a violation.
pub fn check_envelope_gap(
    name: &str,
    obj: &dyn Objective,
    lipschitz: f64,
    lambda: f64,
    points: &[Vec<f64>],
    cfg: &ProxSolverConfig,
    tol: f64,
) -> Result<CheckReport> {
    let bound = lipschitz * lipschitz * lambda / 2.0;
    let mut worst = 0.0f64;
    for x in points {
        let probe = prox_point(obj, x, lambda, cfg)?;
        worst = worst.max(obj.value(x) - probe.envelope_value);
    }
    let mut r = CheckReport::default();
    r.push_le(format!("envelope_gap[{name}]"), worst, bound + tol);
    Ok(r)
}

/// `max(0, max over pairs of -<g_a - g_b, a - b> / |a - b|^2)`; pairs closer
/// than `1e-10` are skipped.
pub fn estimate_hypomonotonicity<S>(obj: &dyn Objective, sampler: S, n_pairs: usize, stream: RngStreamSpec) -> f64
where
    S: Fn(&mut ChaCha8Rng) -> Vec<f64>,
{
    let mut rng = stream.rng();
    let mut rho = 0.0f64;
    for _ in 0..n_pairs {
        let a = sampler(&mut rng);
        let b = sampler(&mut rng);
        let d = sub(&a, &b);
        let dd = dot(&d, &d);
        if dd.sqrt() < 1e-10 {
            continue;
        }
        let gd = sub(&obj.subgradient(&a), &obj.subgradient(&b));
        rho = rho.max(-dot(&gd, &d) / dd);
    }
    rho
}

/// Minimum values and argmins of `f` and its dense-grid envelope coincide.
/// `grid` lists points, `cell` is the grid spacing; values within `tol` of the
/// minimum count as argmins.
pub fn check_argmin_equivalence(
    name: &str,
    obj: &dyn Objective,
    lambda: f64,
    grid: &[Vec<f64>],
    cell: f64,
    tol: f64,
) -> CheckReport {
    let f: Vec<f64> = grid.iter().map(|x| obj.value(x)).collect();
    let env: Vec<f64> = grid
        .iter()
        .map(|xi| {
            grid.iter()
                .zip(&f)
                .map(|(xj, fj)| fj + dot(&sub(xi, xj), &sub(xi, xj)) / (2.0 * lambda))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let min_f = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_e = env.iter().cloned().fold(f64::INFINITY, f64::min);
    let arg = |v: &[f64], m: f64| -> Vec<&Vec<f64>> { grid.iter().zip(v).filter(|(_, x)| **x <= m + tol).map(|(p, _)| p).collect() };
    let (af, ae) = (arg(&f, min_f), arg(&env, min_e));
    let near = |p: &Vec<f64>, set: &[&Vec<f64>]| set.iter().any(|q| norm(&sub(p, q)) <= cell * (1.0 + 1e-9) * (p.len() as f64).sqrt());
    let mismatch = af.iter().filter(|p| !near(p, &ae)).count() + ae.iter().filter(|p| !near(p, &af)).count();
    let mut r = CheckReport::default();
    r.push_le(format!("argmin_value_gap[{name}]"), (min_f - min_e).abs(), tol);
    r.push_le(format!("argmin_mismatch[{name}]"), mismatch as f64, 0.0);
    r
}

/// `max over pairs of |G(y1) - G(y2)| / |y1 - y2|` for a fixed-`x` cross gradient `G`.
pub fn check_cross_lipschitz<G, S>(grad: G, sampler: S, n_pairs: usize, stream: RngStreamSpec) -> f64
where
    G: Fn(&[f64]) -> Vec<f64>,
    S: Fn(&mut ChaCha8Rng) -> Vec<f64>,
{
    let mut rng = stream.rng();
    let mut l = 0.0f64;
    for _ in 0..n_pairs {
        let a = sampler(&mut rng);
        let b = sampler(&mut rng);
        let d = norm(&sub(&a, &b));
        if d < 1e-10 {
            continue;
        }
        l = l.max(norm(&sub(&grad(&a), &grad(&b))) / d);
    }
    l
}

/// `L_{x,1} = L_f' + L_g' / sigma1`.
pub fn analytic_cross_lipschitz(l_f_prime: f64, l_g_prime: f64, sigma1: f64) -> f64 {
    l_f_prime + l_g_prime / sigma1
}

/// `2 mu/(1 + mu lambda) (f_lambda(x) - f*) <= |grad f_lambda(x)|^2` at each point.
pub fn check_envelope_pl(
    name: &str,
    obj: &dyn Objective,
    mu: f64,
    f_star: f64,
    lambda: f64,
    points: &[Vec<f64>],
    cfg: &ProxSolverConfig,
    tol: f64,
) -> Result<CheckReport> {
    let mu_l = mu / (1.0 + mu * lambda);
    let mut worst = f64::NEG_INFINITY;
    for x in points {
        let p = prox_point(obj, x, lambda, cfg)?;
        worst = worst.max(2.0 * mu_l * (p.envelope_value - f_star) - p.envelope_grad_norm.powi(2));
    }
    let mut r = CheckReport::default();
    r.push_le(format!("envelope_pl[{name}]"), worst, tol);
    Ok(r)
}

/// `<grad f_lambda(x), g> >= (1 - rho lambda) |grad f_lambda(x)|^2` for `g` in `df(x)`.
pub fn check_hypomonotone_inner_product(
    name: &str,
    obj: &dyn Objective,
    rho: f64,
    lambda: f64,
    points: &[Vec<f64>],
    cfg: &ProxSolverConfig,
    tol: f64,
) -> Result<CheckReport> {
    let mut worst = f64::NEG_INFINITY;
    for x in points {
        let p = prox_point(obj, x, lambda, cfg)?;
        let ge: Vec<f64> = sub(x, p.prox_point.as_slice()).iter().map(|v| v / lambda).collect();
        let lhs = dot(&ge, &obj.subgradient(x));
        worst = worst.max((1.0 - rho * lambda) * dot(&ge, &ge) - lhs);
    }
    let mut r = CheckReport::default();
    r.push_le(format!("hypomonotone_inner_product[{name}]"), worst, tol);
    Ok(r)
}

/// Largest change of the probed envelope gradient norm under perturbations of size `delta`.
pub fn envelope_continuity(obj: &dyn Objective, points: &[Vec<f64>], lambda: f64, delta: f64, cfg: &ProxSolverConfig) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in points {
        let a = prox_point(obj, x, lambda, cfg)?.envelope_grad_norm;
        let xp: Vec<f64> = x.iter().map(|v| v + delta).collect();
        let b = prox_point(obj, &xp, lambda, cfg)?.envelope_grad_norm;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Empirical `P(1(h > c0) != 1(h_hat > c0))` per batch size. `estimate(b, stream)`
/// returns one batch estimate; trial `j` for batch size `b` uses
/// `stream.child(b).child(j)`.
pub fn tau_mismatch_rate<E>(h_exact: f64, c0: f64, batch_sizes: &[usize], trials: usize, stream: RngStreamSpec, estimate: E) -> Vec<(usize, f64)>
where
    E: Fn(usize, RngStreamSpec) -> f64 + Sync,
{
    use rayon::prelude::*;
    let truth = h_exact > c0;
    batch_sizes
        .iter()
        .map(|&b| {
            let base = stream.child(b as u64);
            let misses: usize = (0..trials)
                .into_par_iter()
                .map(|j| usize::from((estimate(b, base.child(j as u64)) > c0) != truth))
                .sum();
            (b, misses as f64 / trials.max(1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub series: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `log v` on `log t` over points with `t` in `[lo, hi]`.
pub fn fit_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, v)| *t >= window.0 && *t <= window.1 && *t > 0.0 && *v > 0.0)
        .collect();
    if pts.len() < 2 {
        return Err(Error::EmptyWindow);
    }
    let n = pts.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = pts.iter().map(|(t, v)| (t.ln(), v.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::EmptyWindow);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        series: pts,
        slope,
        intercept,
        r_squared,
    })
}

/// `(t, (1/n_t) sum_{s <= t} v_s)` for a sparsely indexed series.
pub fn running_average(series: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut acc = 0.0;
    series
        .iter()
        .enumerate()
        .map(|(i, (t, v))| {
            acc += v;
            (*t, acc / (i + 1) as f64)
        })
        .collect()
}

/// Uniform sampler over a box.
pub fn box_sampler(bx: Vec<(f64, f64)>) -> impl Fn(&mut ChaCha8Rng) -> Vec<f64> {
    move |rng| bx.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
}

/// Named catalog functions with known constants, used by the check suite.
pub mod catalog {
    use super::FnObjective;

    pub fn quadratic() -> impl super::Objective {
        FnObjective {
            dim: 1,
            value: |x: &[f64]| 0.5 * x[0] * x[0],
            subgradient: |x: &[f64]| vec![x[0]],
        }
    }

    pub fn neg_quadratic() -> impl super::Objective {
        FnObjective {
            dim: 1,
            value: |x: &[f64]| -0.5 * x[0] * x[0],
            subgradient: |x: &[f64]| vec![-x[0]],
        }
    }

    pub fn abs() -> impl super::Objective {
        FnObjective {
            dim: 1,
            value: |x: &[f64]| x[0].abs(),
            subgradient: |x: &[f64]| vec![if x[0] > 0.0 { 1.0 } else if x[0] < 0.0 { -1.0 } else { 0.0 }],
        }
    }

    pub fn sine() -> impl super::Objective {
        FnObjective {
            dim: 1,
            value: |x: &[f64]| x[0].sin(),
            subgradient: |x: &[f64]| vec![x[0].cos()],
        }
    }

    pub fn double_well() -> impl super::Objective {
        FnObjective {
            dim: 1,
            value: |x: &[f64]| (x[0] * x[0] - 1.0).powi(2),
            subgradient: |x: &[f64]| vec![4.0 * x[0] * (x[0] * x[0] - 1.0)],
        }
    }

    pub fn constant() -> impl super::Objective {
        FnObjective {
            dim: 1,
            value: |_: &[f64]| 3.0,
            subgradient: |_: &[f64]| vec![0.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::catalog::*;
    use super::*;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
    }

    #[test]
    fn quadratic_prox_closed_form() {
        let q = quadratic();
        for (x, lambda, scale) in [(2.0, 1.0, 1.0), (-3.0, 0.5, 3.0), (0.7, 2.0, 1.5), (1.3, 0.3, 4.0)] {
            let cfg = ProxSolverConfig {
                step_scale: scale,
                ..Default::default()
            };
            let p = prox_point(&q, &[x], lambda, &cfg).unwrap();
            assert!((p.prox_point.as_slice()[0] - x / (1.0 + lambda)).abs() < 1e-8);
            assert!(p.solver_iters <= 500);
        }
        let p = prox_point(&q, &[2.0], 1.0, &ProxSolverConfig::default()).unwrap();
        assert!((p.envelope_value - 1.0).abs() < 1e-12);
        assert_eq!(p.envelope_grad_norm, (2.0 - p.prox_point.as_slice()[0]).abs() / 1.0);
    }

    #[test]
    fn abs_prox_soft_threshold() {
        let cfg = ProxSolverConfig {
            max_iters: 2_000_000,
            ..Default::default()
        };
        let a = abs();
        let p = prox_point(&a, &[3.0], 1.0, &cfg).unwrap();
        assert!((p.prox_point.as_slice()[0] - 2.0).abs() < 1e-6);
        assert!((p.envelope_value - 2.5).abs() < 1e-6);
        let p = prox_point(&a, &[0.5], 1.0, &cfg).unwrap();
        assert!(p.prox_point.as_slice()[0].abs() < 1e-6);
        assert!((p.envelope_value - 0.125).abs() < 1e-6);
        assert!(p.envelope_value <= a.value(&[0.5]));
    }

    #[test]
    fn envelope_gap_examples() {
        let cfg = ProxSolverConfig {
            max_iters: 200_000,
            ..Default::default()
        };
        let pts: Vec<Vec<f64>> = grid(-2.0, 2.0, 20).into_iter().map(|v| vec![v]).collect();
        let r = check_envelope_gap("abs", &abs(), 1.0, 0.5, &pts, &cfg, 1e-6).unwrap();
        assert!(r.all_pass());
        assert!((r.rows[0].measured - 0.25).abs() < 1e-4, "{}", r.rows[0].measured);
        let r = check_envelope_gap("const", &constant(), 0.0, 0.5, &pts, &cfg, 1e-12).unwrap();
        assert!(r.all_pass() && r.rows[0].measured == 0.0);
        let r = check_envelope_gap("abs_wrong_l", &abs(), 0.5, 0.5, &pts, &cfg, 1e-6).unwrap();
        assert!(!r.all_pass());
    }

    #[test]
    fn hypomonotonicity_examples() {
        let s = box_sampler(vec![(-10.0, 10.0)]);
        assert_eq!(estimate_hypomonotonicity(&quadratic(), &s, 1000, RngStreamSpec::new(1, 0)), 0.0);
        let rho = estimate_hypomonotonicity(&neg_quadratic(), &s, 1000, RngStreamSpec::new(1, 0));
        assert!((rho - 1.0).abs() < 1e-12);
        let rho = estimate_hypomonotonicity(&sine(), &s, 10_000, RngStreamSpec::new(1, 0));
        assert!(rho <= 1.0 + 1e-6 && rho > 0.5);
    }

    #[test]
    fn argmin_equivalence_examples() {
        let g: Vec<Vec<f64>> = grid(-2.0, 2.0, 2000).into_iter().map(|v| vec![v]).collect();
        for (name, obj) in [
            ("double_well", Box::new(double_well()) as Box<dyn Objective>),
            ("quadratic", Box::new(quadratic())),
            ("abs", Box::new(abs())),
        ] {
            let r = check_argmin_equivalence(name, obj.as_ref(), 0.1, &g, 0.002, 1e-12);
            assert!(r.all_pass(), "{name}: {:?}", r.rows);
        }
    }

    #[test]
    fn cross_lipschitz_linear_and_constant() {
        let s = box_sampler(vec![(-1.0, 1.0)]);
        let l = check_cross_lipschitz(|y: &[f64]| vec![3.0 * y[0]], &s, 100, RngStreamSpec::new(0, 1));
        assert!((l - 3.0).abs() < 1e-9);
        assert_eq!(check_cross_lipschitz(|_: &[f64]| vec![1.0], &s, 100, RngStreamSpec::new(0, 1)), 0.0);
        assert_eq!(analytic_cross_lipschitz(1.0, 2.0, 0.5), 5.0);
        assert_eq!(analytic_cross_lipschitz(1.0, 2.0, 0.25), 9.0);
    }

    #[test]
    fn rate_fit_examples() {
        let s: Vec<(f64, f64)> = (1..200).map(|t| (t as f64, 3.0 / (t as f64).sqrt())).collect();
        let fit = fit_rate(&s, (1.0, 200.0)).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-9 && (fit.r_squared - 1.0).abs() < 1e-9);
        let c: Vec<(f64, f64)> = (1..50).map(|t| (t as f64, 2.0)).collect();
        assert!(fit_rate(&c, (1.0, 50.0)).unwrap().slope.abs() < 1e-12);
        assert!(matches!(fit_rate(&c, (100.0, 200.0)), Err(Error::EmptyWindow)));
    }

    #[test]
    fn pl_and_inner_product_on_quadratic() {
        let pts: Vec<Vec<f64>> = grid(-3.0, 3.0, 12).into_iter().map(|v| vec![v]).collect();
        let cfg = ProxSolverConfig::default();
        assert!(check_envelope_pl("quadratic", &quadratic(), 1.0, 0.0, 0.5, &pts, &cfg, 1e-10).unwrap().all_pass());
        assert!(check_hypomonotone_inner_product("sine", &sine(), 1.0, 0.5, &pts, &ProxSolverConfig { max_iters: 5000, ..cfg }, 1e-6)
            .unwrap()
            .all_pass());
    }

    #[test]
    fn tau_mismatch_far_and_at_threshold() {
        let noisy = |b: usize, s: RngStreamSpec| {
            let mut rng = s.rng();
            let m: f64 = (0..b).map(|_| rng.random::<f64>() - 0.5).sum::<f64>() / b as f64;
            1.0 + m
        };
        let far = tau_mismatch_rate(1.0, 5.0, &[4, 16], 200, RngStreamSpec::new(0, 0), noisy);
        assert!(far.iter().all(|(_, r)| *r == 0.0));
        let at = tau_mismatch_rate(1.0, 1.0, &[4, 64], 2000, RngStreamSpec::new(0, 0), noisy);
        assert!(at.iter().all(|(_, r)| (r - 0.5).abs() < 0.05), "{at:?}");
    }
}
