//! Low-dimensional constrained bilevel test problems with noisy unbiased
//! gradient oracles, and a brute-force grid oracle for ground truth.
//!
//! Catalog (our construction):
//! - `P1`: `f = (y-1)^2`, `g = (y^2-x)^2`, `h = -y`, `c0 = 0`. Inner minima
//!   `+-sqrt(x)`, the constraint keeps `+sqrt(x)`, outer optimum `x = 1`.
//! - `P2`: `f = (y-1)^2 + 0.1 (x-0.5)^2`, `g = (y-x)^2`, `h = sin(3y) + y^2`, `c0 = 0.8`.
//! - `P3`: two-dimensional `y`, `f = (y1-1)^2 + (y2-0.5)^2 + 0.1 (x-0.5)^2`,
//!   `g = (y1-x)^2 + (y2-x/2)^2 + y1 y2 / 2 + 0.2 cos(3 y1 + 2 y2)`,
//!   `h = y1 + y2 + 0.3 sin(2 y1)`, `c0 = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::Objective;
use crate::error::{Error, Result};
use crate::estimators::clarke_tau;
use crate::penalty::{hinge, PenaltyCoefficients};
use crate::record::fmt_float;
use crate::rng::RngStreamSpec;

type ValueFn = fn(&[f64], &[f64]) -> f64;
type GradFn = fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>);

#[derive(Clone, Copy)]
struct Functions {
    f: ValueFn,
    f_grad: GradFn,
    g: ValueFn,
    g_grad: GradFn,
    h: fn(&[f64]) -> f64,
    h_grad: fn(&[f64]) -> Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub f: f64,
    pub g: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradComponent {
    FX,
    FY,
    GX,
    GY,
    HY,
}

#[derive(Clone)]
pub struct SyntheticProblem {
    pub name: String,
    pub d_x: usize,
    pub d_y: usize,
    pub c0: f64,
    pub noise: NoiseLevels,
    pub x_box: Vec<(f64, f64)>,
    pub y_box: Vec<(f64, f64)>,
    funcs: Functions,
}

impl std::fmt::Debug for SyntheticProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticProblem")
            .field("name", &self.name)
            .field("d_x", &self.d_x)
            .field("d_y", &self.d_y)
            .field("c0", &self.c0)
            .field("noise", &self.noise)
            .finish()
    }
}

pub const CATALOG: [&str; 3] = ["P1", "P2", "P3"];

fn p1() -> (Functions, f64, Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let funcs = Functions {
        f: |_, y| (y[0] - 1.0).powi(2),
        f_grad: |_, y| (vec![0.0], vec![2.0 * (y[0] - 1.0)]),
        g: |x, y| (y[0] * y[0] - x[0]).powi(2),
        g_grad: |x, y| {
            let r = y[0] * y[0] - x[0];
            (vec![-2.0 * r], vec![4.0 * y[0] * r])
        },
        h: |y| -y[0],
        h_grad: |_| vec![-1.0],
    };
    (funcs, 0.0, vec![(0.0, 2.0)], vec![(-2.0, 2.0)])
}

fn p2() -> (Functions, f64, Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let funcs = Functions {
        f: |x, y| (y[0] - 1.0).powi(2) + 0.1 * (x[0] - 0.5).powi(2),
        f_grad: |x, y| (vec![0.2 * (x[0] - 0.5)], vec![2.0 * (y[0] - 1.0)]),
        g: |x, y| (y[0] - x[0]).powi(2),
        g_grad: |x, y| (vec![-2.0 * (y[0] - x[0])], vec![2.0 * (y[0] - x[0])]),
        h: |y| (3.0 * y[0]).sin() + y[0] * y[0],
        h_grad: |y| vec![3.0 * (3.0 * y[0]).cos() + 2.0 * y[0]],
    };
    (funcs, 0.8, vec![(-1.5, 1.5)], vec![(-2.0, 2.0)])
}

fn p3() -> (Functions, f64, Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let funcs = Functions {
        f: |x, y| (y[0] - 1.0).powi(2) + (y[1] - 0.5).powi(2) + 0.1 * (x[0] - 0.5).powi(2),
        f_grad: |x, y| (vec![0.2 * (x[0] - 0.5)], vec![2.0 * (y[0] - 1.0), 2.0 * (y[1] - 0.5)]),
        g: |x, y| {
            (y[0] - x[0]).powi(2) + (y[1] - 0.5 * x[0]).powi(2) + 0.5 * y[0] * y[1] + 0.2 * (3.0 * y[0] + 2.0 * y[1]).cos()
        },
        g_grad: |x, y| {
            let s = (3.0 * y[0] + 2.0 * y[1]).sin();
            (
                vec![-2.0 * (y[0] - x[0]) - (y[1] - 0.5 * x[0])],
                vec![
                    2.0 * (y[0] - x[0]) + 0.5 * y[1] - 0.6 * s,
                    2.0 * (y[1] - 0.5 * x[0]) + 0.5 * y[0] - 0.4 * s,
                ],
            )
        },
        h: |y| y[0] + y[1] + 0.3 * (2.0 * y[0]).sin(),
        h_grad: |y| vec![1.0 + 0.6 * (2.0 * y[0]).cos(), 1.0],
    };
    (funcs, 1.0, vec![(-1.0, 2.0)], vec![(-2.0, 2.0), (-2.0, 2.0)])
}

/// Builds a catalog problem and checks its gradients against central
/// differences at 100 random points of its box.
pub fn make_problem(name: &str) -> Result<SyntheticProblem> {
    let (funcs, c0, x_box, y_box) = match name {
        "P1" => p1(),
        "P2" => p2(),
        "P3" => p3(),
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    let p = SyntheticProblem {
        name: name.to_string(),
        d_x: x_box.len(),
        d_y: y_box.len(),
        c0,
        noise: NoiseLevels { f: 0.1, g: 0.1, h: 0.1 },
        x_box,
        y_box,
        funcs,
    };
    p.check_gradients(100, 1e-5)?;
    Ok(p)
}

impl SyntheticProblem {
    pub fn with_noise(mut self, noise: NoiseLevels) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_c0(mut self, c0: f64) -> Self {
        self.c0 = c0;
        self
    }

    pub fn f(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.funcs.f)(x, y)
    }
    pub fn g(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.funcs.g)(x, y)
    }
    pub fn h(&self, y: &[f64]) -> f64 {
        (self.funcs.h)(y)
    }
    pub fn h_plus(&self, y: &[f64]) -> f64 {
        hinge(self.h(y), self.c0)
    }

    pub fn exact_grad(&self, which: GradComponent, x: &[f64], y: &[f64]) -> Vec<f64> {
        match which {
            GradComponent::FX => (self.funcs.f_grad)(x, y).0,
            GradComponent::FY => (self.funcs.f_grad)(x, y).1,
            GradComponent::GX => (self.funcs.g_grad)(x, y).0,
            GradComponent::GY => (self.funcs.g_grad)(x, y).1,
            GradComponent::HY => (self.funcs.h_grad)(y),
        }
    }

    fn sigma(&self, which: GradComponent) -> f64 {
        match which {
            GradComponent::FX | GradComponent::FY => self.noise.f,
            GradComponent::GX | GradComponent::GY => self.noise.g,
            GradComponent::HY => self.noise.h,
        }
    }

    /// Exact gradient plus `N(0, sigma^2)` noise per component.
    pub fn noisy_grad(&self, which: GradComponent, x: &[f64], y: &[f64], stream: RngStreamSpec) -> Vec<f64> {
        self.noisy_grad_batch(which, x, y, 1, stream)
    }

    /// Mean of `b` independent noisy gradients, drawn as one `N(0, sigma^2 / b)` perturbation.
    pub fn noisy_grad_batch(&self, which: GradComponent, x: &[f64], y: &[f64], b: usize, stream: RngStreamSpec) -> Vec<f64> {
        let mut g = self.exact_grad(which, x, y);
        let s = self.sigma(which) / (b.max(1) as f64).sqrt();
        if s > 0.0 {
            let mut rng = stream.rng();
            for v in &mut g {
                *v += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        g
    }

    /// `tau(h(y)) * (grad h(y) + noise)` with `tau` from the exact constraint value.
    pub fn noisy_hplus_grad(&self, y: &[f64], b: usize, stream: RngStreamSpec) -> (f64, Vec<f64>) {
        let tau = clarke_tau(self.h(y), self.c0);
        let g = self.noisy_grad_batch(GradComponent::HY, &[], y, b, stream);
        (tau, g.into_iter().map(|v| tau * v).collect())
    }

    fn random_point<R: Rng>(bx: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
        bx.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
    }

    /// Max abs deviation between exact gradients and central differences.
    pub fn check_gradients(&self, n_points: usize, tol: f64) -> Result<()> {
        let mut rng = RngStreamSpec::derive(0, "synthetic.gate", 0, 0).rng();
        let eps = 1e-6;
        for _ in 0..n_points {
            let x = Self::random_point(&self.x_box, &mut rng);
            let y = Self::random_point(&self.y_box, &mut rng);
            let checks: [(&str, Box<dyn Fn(&[f64], &[f64]) -> f64>, GradComponent, bool); 5] = [
                ("f_x", Box::new(|a, b| self.f(a, b)), GradComponent::FX, true),
                ("f_y", Box::new(|a, b| self.f(a, b)), GradComponent::FY, false),
                ("g_x", Box::new(|a, b| self.g(a, b)), GradComponent::GX, true),
                ("g_y", Box::new(|a, b| self.g(a, b)), GradComponent::GY, false),
                ("h_y", Box::new(|_, b| self.h(b)), GradComponent::HY, false),
            ];
            for (label, fun, which, wrt_x) in checks.iter() {
                let grad = self.exact_grad(*which, &x, &y);
                let base = if *wrt_x { &x } else { &y };
                for i in 0..base.len() {
                    let mut p = base.clone();
                    let mut m = base.clone();
                    p[i] += eps;
                    m[i] -= eps;
                    let (vp, vm) = if *wrt_x { (fun(&p, &y), fun(&m, &y)) } else { (fun(&x, &p), fun(&x, &m)) };
                    let fd = (vp - vm) / (2.0 * eps);
                    if (fd - grad[i]).abs() > tol * (1.0 + fd.abs()) {
                        return Err(Error::Config(format!(
                            "{}: gradient {label}[{i}] = {} disagrees with finite difference {fd}",
                            self.name, grad[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn box_grid(bx: &[(f64, f64)], step: f64) -> Vec<Vec<f64>> {
        bx.iter()
            .map(|&(lo, hi)| {
                let n = ((hi - lo) / step).round() as usize;
                (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
            })
            .collect()
    }

    /// Exact `(C_f, C_g)` sup-norms over the box, by grid max.
    pub fn sup_norms(&self, step: f64) -> (f64, f64) {
        let xs = flatten_grid(&Self::box_grid(&self.x_box, step));
        let ys = flatten_grid(&Self::box_grid(&self.y_box, step));
        let (mut cf, mut cg) = (0.0f64, 0.0f64);
        for x in &xs {
            for y in &ys {
                cf = cf.max(self.f(x, y).abs());
                cg = cg.max(self.g(x, y).abs());
            }
        }
        (cf, cg)
    }
}

fn flatten_grid(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Which inner objective a minimization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerTarget {
    /// `h1(x, .) = f + (g + h+/sigma3)/sigma1`
    H1,
    /// `h2(x, .) = g + h+/sigma2`
    H2,
    /// `g(x, .)` over the strictly feasible set
    Feasible,
}

fn inner_value(p: &SyntheticProblem, c: &PenaltyCoefficients, target: InnerTarget, x: &[f64], y: &[f64], h_slack: f64) -> f64 {
    match target {
        InnerTarget::H1 => p.f(x, y) + (p.g(x, y) + p.h_plus(y) / c.sigma3()) / c.sigma1(),
        InnerTarget::H2 => p.g(x, y) + p.h_plus(y) / c.sigma2(),
        InnerTarget::Feasible if p.h(y) <= p.c0 - h_slack => p.g(x, y),
        InnerTarget::Feasible => f64::INFINITY,
    }
}

fn golden<F: FnMut(f64) -> f64>(mut fun: F, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (fun(c), fun(d));
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = fun(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = fun(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

/// Grid scan over the `y` box followed by cyclic golden-section refinement
/// within one cell of the best grid point.
pub fn inner_minimize(
    p: &SyntheticProblem,
    c: &PenaltyCoefficients,
    target: InnerTarget,
    x: &[f64],
    step: f64,
    h_slack: f64,
) -> Option<(Vec<f64>, f64)> {
    let axes = SyntheticProblem::box_grid(&p.y_box, step);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for y in flatten_grid(&axes) {
        let v = inner_value(p, c, target, x, &y, h_slack);
        if v.is_finite() && best.as_ref().is_none_or(|b| v < b.1) {
            best = Some((y, v));
        }
    }
    let (mut y, mut v) = best?;
    for _sweep in 0..3 {
        for i in 0..y.len() {
            let (lo, hi) = p.y_box[i];
            let (a, b) = ((y[i] - step).max(lo), (y[i] + step).min(hi));
            let mut trial = y.clone();
            let t = golden(
                |s| {
                    trial[i] = s;
                    inner_value(p, c, target, x, &trial, h_slack)
                },
                a,
                b,
                80,
            );
            let mut cand = y.clone();
            cand[i] = t;
            let cv = inner_value(p, c, target, x, &cand, h_slack);
            if cv < v {
                y = cand;
                v = cv;
            }
        }
    }
    Some((y, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridResolution {
    pub x_step: f64,
    pub y_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOracleResult {
    pub problem: String,
    pub resolution: GridResolution,
    pub x_grid: Vec<f64>,
    pub y_grid: Vec<Vec<f64>>,
    /// Over the flattened `y` grid (row-major in the `y` axes).
    pub feasible_mask: Vec<bool>,
    /// Feasible minimizer of `g(x, .)` per `x`.
    pub y_star: Vec<Vec<f64>>,
    /// Minimizer of `h2(x, .)` per `x`.
    pub z_star: Vec<Vec<f64>>,
    /// Minimizer of `h1(x, .)` per `x`.
    pub y_star_h1: Vec<Vec<f64>>,
    /// Penalized `Phi(x) = min h1 - min h2 / sigma1`.
    pub phi_table: Vec<f64>,
    /// Original bilevel objective `f(x, y_star(x))`.
    pub bilevel_table: Vec<f64>,
    pub best_x: f64,
    pub bilevel_best_x: f64,
}

impl GridOracleResult {
    pub fn cache_key(problem: &SyntheticProblem, res: &GridResolution, c: &PenaltyCoefficients) -> String {
        format!(
            "{}_dx{}_dy{}_s{}_{}_{}",
            problem.name,
            res.x_step,
            res.y_step,
            c.sigma1(),
            c.sigma2(),
            c.sigma3()
        )
    }

    /// Delimiter-separated table, one row per `x` grid point.
    pub fn to_table(&self) -> String {
        let dy = self.y_star.first().map_or(0, |v| v.len());
        let mut head = vec!["x".to_string(), "phi".into(), "bilevel".into()];
        for (name, _) in [("y_star", 0), ("z_star", 1), ("y_star_h1", 2)] {
            for i in 0..dy {
                head.push(format!("{name}_{i}"));
            }
        }
        let mut out = head.join(",");
        out.push('\n');
        for (i, x) in self.x_grid.iter().enumerate() {
            let mut row = vec![fmt_float(*x), fmt_float(self.phi_table[i]), fmt_float(self.bilevel_table[i])];
            for table in [&self.y_star, &self.z_star, &self.y_star_h1] {
                row.extend(table[i].iter().map(|v| fmt_float(*v)));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Exhaustive scan over a 1-D `x` grid with refined inner minimizations.
pub fn grid_bilevel_oracle(
    p: &SyntheticProblem,
    c: &PenaltyCoefficients,
    res: GridResolution,
) -> Result<GridOracleResult> {
    if p.d_x != 1 || p.d_y > 2 {
        return Err(Error::Config(format!(
            "grid oracle needs 1-D x and at most 2-D y, {} has d_x = {}, d_y = {}",
            p.name, p.d_x, p.d_y
        )));
    }
    let x_grid = SyntheticProblem::box_grid(&p.x_box, res.x_step).remove(0);
    let y_axes = SyntheticProblem::box_grid(&p.y_box, res.y_step);
    let y_points = flatten_grid(&y_axes);
    let h_vals: Vec<f64> = y_points.iter().map(|y| p.h(y)).collect();
    // largest change of h between grid neighbours
    let stride: Vec<usize> = (0..y_axes.len())
        .map(|d| y_axes[d + 1..].iter().map(|a| a.len()).product())
        .collect();
    let mut h_res = 0.0f64;
    for (i, hv) in h_vals.iter().enumerate() {
        for (d, st) in stride.iter().enumerate() {
            let coord = (i / st) % y_axes[d].len();
            if coord + 1 < y_axes[d].len() {
                h_res = h_res.max((h_vals[i + st] - hv).abs());
            }
        }
    }
    let slack = 0.5 * h_res;
    let feasible_mask: Vec<bool> = h_vals.iter().map(|h| *h <= p.c0 - slack).collect();
    if !feasible_mask.iter().any(|m| *m) {
        return Err(Error::InfeasibleEverywhere);
    }
    let rows: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)>> = x_grid
        .par_iter()
        .map(|&x| {
            let xv = [x];
            let (ys, _) = inner_minimize(p, c, InnerTarget::Feasible, &xv, res.y_step, slack)
                .ok_or(Error::InfeasibleEverywhere)?;
            let (zs, v2) = inner_minimize(p, c, InnerTarget::H2, &xv, res.y_step, slack).ok_or(Error::InfeasibleEverywhere)?;
            let (y1, v1) = inner_minimize(p, c, InnerTarget::H1, &xv, res.y_step, slack).ok_or(Error::InfeasibleEverywhere)?;
            let bilevel = p.f(&xv, &ys);
            Ok((ys, zs, y1, v1 - v2 / c.sigma1(), bilevel))
        })
        .collect();
    let mut out = GridOracleResult {
        problem: p.name.clone(),
        resolution: res,
        x_grid: x_grid.clone(),
        y_grid: y_axes,
        feasible_mask,
        y_star: vec![],
        z_star: vec![],
        y_star_h1: vec![],
        phi_table: vec![],
        bilevel_table: vec![],
        best_x: 0.0,
        bilevel_best_x: 0.0,
    };
    for r in rows {
        let (ys, zs, y1, phi, bil) = r?;
        out.y_star.push(ys);
        out.z_star.push(zs);
        out.y_star_h1.push(y1);
        out.phi_table.push(phi);
        out.bilevel_table.push(bil);
    }
    let argmin = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x < v[b] { i } else { b });
    out.best_x = x_grid[argmin(&out.phi_table)];
    out.bilevel_best_x = x_grid[argmin(&out.bilevel_table)];
    Ok(out)
}

/// The penalized value function `Phi(x) = min_y h1(x,y) - min_z h2(x,z)/sigma1`
/// with Danskin subgradients at refined grid minimizers.
pub struct PenalizedPhi<'a> {
    pub problem: &'a SyntheticProblem,
    pub coeffs: PenaltyCoefficients,
    pub y_step: f64,
}

impl PenalizedPhi<'_> {
    fn minimizers(&self, x: &[f64]) -> ((Vec<f64>, f64), (Vec<f64>, f64)) {
        let y = inner_minimize(self.problem, &self.coeffs, InnerTarget::H1, x, self.y_step, 0.0).expect("unconstrained");
        let z = inner_minimize(self.problem, &self.coeffs, InnerTarget::H2, x, self.y_step, 0.0).expect("unconstrained");
        (y, z)
    }
}

impl Objective for PenalizedPhi<'_> {
    fn dim(&self) -> usize {
        self.problem.d_x
    }

    fn value(&self, x: &[f64]) -> f64 {
        let ((_, v1), (_, v2)) = self.minimizers(x);
        v1 - v2 / self.coeffs.sigma1()
    }

    fn subgradient(&self, x: &[f64]) -> Vec<f64> {
        let ((y, _), (z, _)) = self.minimizers(x);
        let p = self.problem;
        let s1 = self.coeffs.sigma1();
        let fx = p.exact_grad(GradComponent::FX, x, &y);
        let gy = p.exact_grad(GradComponent::GX, x, &y);
        let gz = p.exact_grad(GradComponent::GX, x, &z);
        (0..x.len()).map(|i| fx[i] + gy[i] / s1 - gz[i] / s1).collect()
    }
}
