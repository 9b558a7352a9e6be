//! The CBSO driver: `T` outer iterations, each running `K` inner subgradient
//! steps on `y` (objective `h1`) and `z` (objective `h2`) followed by one outer
//! step on `x` along the estimated `d_x phi`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{prox_point, Objective, ProxSolverConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::estimators::{
    self, combine_h1, combine_h2, combine_phi_x, grad_x_f_hat_sampled, SubgradientSample,
};
use crate::objectives::{h1_value, h2_value, RlhfProblem};
use crate::params::ParamVector;
use crate::penalty::PenaltyCoefficients;
use crate::record::{InnerRecord, RunRecord};
use crate::rng::{iteration_id, RngStreamSpec};
use crate::schedule::StepSchedule;
use crate::synthetic::{GradComponent, PenalizedPhi, SyntheticProblem};

/// Exact (or fixed-stream) evaluation of the quantities logged per outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub f_y: f64,
    pub g_y: f64,
    pub g_z: f64,
    pub h_y: f64,
    pub h_z: f64,
}

/// A bilevel problem exposing the five component estimators.
pub trait BilevelProblem: Sync {
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    fn c0(&self) -> f64;
    fn grad_y_f(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample>;
    fn grad_y_g(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample>;
    fn subgrad_y_hplus(&self, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample>;
    fn grad_x_f(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample>;
    fn grad_x_g(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample>;
    fn evaluate(&self, x: &ParamVector, y: &ParamVector, z: &ParamVector, stream: RngStreamSpec) -> Result<Evaluation>;
    /// Box on `x` used when the driver projects outer iterates.
    fn x_domain(&self) -> Option<&[(f64, f64)]> {
        None
    }
    /// The penalized value function `Phi` for envelope probes, when evaluable.
    fn phi_objective(&self, _coeffs: &PenaltyCoefficients) -> Option<Box<dyn Objective + '_>> {
        None
    }
}

impl BilevelProblem for RlhfProblem {
    fn x_dim(&self) -> usize {
        self.mdp.reward_dim()
    }
    fn y_dim(&self) -> usize {
        self.mdp.policy_dim()
    }
    fn c0(&self) -> f64 {
        self.mdp.c0()
    }
    fn x_domain(&self) -> Option<&[(f64, f64)]> {
        self.x_box.as_deref()
    }
    fn grad_y_f(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        estimators::grad_y_f_hat(self, x, y, b, stream)
    }
    fn grad_y_g(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        estimators::grad_y_g_hat(self, x, y, b, stream)
    }
    fn subgrad_y_hplus(&self, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        estimators::subgrad_y_hplus_hat(self, y, b, self.mdp.c0(), stream)
    }
    fn grad_x_f(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        grad_x_f_hat_sampled(self, x, y, b, stream)
    }
    fn grad_x_g(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        estimators::grad_x_g_hat(self, x, y, b, stream)
    }
    fn evaluate(&self, x: &ParamVector, y: &ParamVector, z: &ParamVector, stream: RngStreamSpec) -> Result<Evaluation> {
        Ok(Evaluation {
            f_y: self.f_estimate(x, y, stream)?,
            g_y: self.g_exact(x, y)?,
            g_z: self.g_exact(x, z)?,
            h_y: self.h_exact(y)?,
            h_z: self.h_exact(z)?,
        })
    }
}

fn synthetic_sample(
    p: &SyntheticProblem,
    which: GradComponent,
    x: &ParamVector,
    y: &ParamVector,
    b: usize,
    stream: RngStreamSpec,
    value: f64,
) -> Result<SubgradientSample> {
    estimators::check_batch(b)?;
    let v = p.noisy_grad_batch(which, x.as_slice(), y.as_slice(), b, stream);
    Ok(SubgradientSample {
        vector: ParamVector::new(v)?,
        batch_size: b,
        horizon: 0,
        tau: None,
        n_rollouts_per_q: 0,
        value,
    })
}

/// Noisy-oracle instantiation: values are exact, gradients carry Gaussian
/// noise of standard deviation `sigma / sqrt(B)`, and the hinge indicator is
/// computed from the exact constraint.
impl BilevelProblem for SyntheticProblem {
    fn x_dim(&self) -> usize {
        self.d_x
    }
    fn y_dim(&self) -> usize {
        self.d_y
    }
    fn c0(&self) -> f64 {
        self.c0
    }
    fn grad_y_f(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        synthetic_sample(self, GradComponent::FY, x, y, b, stream, self.f(x.as_slice(), y.as_slice()))
    }
    fn grad_y_g(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        synthetic_sample(self, GradComponent::GY, x, y, b, stream, self.g(x.as_slice(), y.as_slice()))
    }
    fn subgrad_y_hplus(&self, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        estimators::check_batch(b)?;
        let (tau, v) = self.noisy_hplus_grad(y.as_slice(), b, stream);
        Ok(SubgradientSample {
            vector: ParamVector::new(v)?,
            batch_size: b,
            horizon: 0,
            tau: Some(tau),
            n_rollouts_per_q: 0,
            value: self.h_plus(y.as_slice()),
        })
    }
    fn grad_x_f(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        synthetic_sample(self, GradComponent::FX, x, y, b, stream, self.f(x.as_slice(), y.as_slice()))
    }
    fn grad_x_g(&self, x: &ParamVector, y: &ParamVector, b: usize, stream: RngStreamSpec) -> Result<SubgradientSample> {
        synthetic_sample(self, GradComponent::GX, x, y, b, stream, self.g(x.as_slice(), y.as_slice()))
    }
    fn evaluate(&self, x: &ParamVector, y: &ParamVector, z: &ParamVector, _stream: RngStreamSpec) -> Result<Evaluation> {
        let (x, y, z) = (x.as_slice(), y.as_slice(), z.as_slice());
        Ok(Evaluation {
            f_y: self.f(x, y),
            g_y: self.g(x, y),
            g_z: self.g(x, z),
            h_y: self.h(y),
            h_z: self.h(z),
        })
    }
    fn x_domain(&self) -> Option<&[(f64, f64)]> {
        Some(&self.x_box)
    }
    fn phi_objective(&self, coeffs: &PenaltyCoefficients) -> Option<Box<dyn Objective + '_>> {
        (self.d_x == 1 && self.d_y <= 2).then(|| {
            Box::new(PenalizedPhi {
                problem: self,
                coeffs: *coeffs,
                y_step: if self.d_y == 1 { 0.01 } else { 0.05 },
            }) as Box<dyn Objective + '_>
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Probe at every outer iteration `t` with `t % every == 0`.
    pub every: usize,
    pub lambda: f64,
    pub solver: ProxSolverConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbsoConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub coeffs: PenaltyCoefficients,
    pub outer_schedule: StepSchedule,
    pub inner_schedule: StepSchedule,
    pub warm_start_inner: bool,
    /// Clamp `x` to the problem's domain box after each outer step.
    pub project_x: bool,
    /// Estimate `d_y h1` and `d_y h2` from the same random streams.
    pub share_inner_batches: bool,
    pub seed: u64,
    pub probe: Option<ProbeConfig>,
    pub log_inner: bool,
    pub checkpoint_every: Option<usize>,
    pub record_wall_clock: bool,
}

impl CbsoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("outer_iters", self.outer_iters),
            ("inner_iters", self.inner_iters),
            ("batch_size", self.batch_size),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        self.outer_schedule.validated()?;
        self.inner_schedule.validated()?;
        if let Some(p) = &self.probe {
            if p.every == 0 || !(p.lambda > 0.0) {
                return Err(Error::Config("probe.every must be >= 1 and probe.lambda > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbsoState {
    pub x: ParamVector,
    pub y: ParamVector,
    pub z: ParamVector,
    pub t: usize,
    pub log: Vec<RunRecord>,
    pub inner_log: Vec<InnerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub y: ParamVector,
    pub z: ParamVector,
    pub trace: Vec<InnerRecord>,
}

fn streams(seed: u64, tags: [&str; 3], t: usize, k: usize) -> [RngStreamSpec; 3] {
    tags.map(|tag| RngStreamSpec::derive(seed, tag, iteration_id(t, k), 0))
}

/// `d_y h1(x, y)` from three independently streamed component estimates.
pub fn subgrad_y_h1_hat<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &ParamVector,
    y: &ParamVector,
    coeffs: &PenaltyCoefficients,
    b: usize,
    s: [RngStreamSpec; 3],
) -> Result<SubgradientSample> {
    let f = problem.grad_y_f(x, y, b, s[0])?;
    let g = problem.grad_y_g(x, y, b, s[1])?;
    let hp = problem.subgrad_y_hplus(y, b, s[2])?;
    combine_h1(&f, &g, &hp, coeffs)
}

/// `d_y h2(x, z)`; `s` holds the `g` and hinge streams.
pub fn subgrad_y_h2_hat<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &ParamVector,
    z: &ParamVector,
    coeffs: &PenaltyCoefficients,
    b: usize,
    s: [RngStreamSpec; 2],
) -> Result<SubgradientSample> {
    let g = problem.grad_y_g(x, z, b, s[0])?;
    let hp = problem.subgrad_y_hplus(z, b, s[1])?;
    combine_h2(&g, &hp, coeffs)
}

/// `d_x phi(x, y_K, z_K)`.
pub fn grad_x_phi_hat<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &ParamVector,
    y: &ParamVector,
    z: &ParamVector,
    coeffs: &PenaltyCoefficients,
    b: usize,
    s: [RngStreamSpec; 3],
) -> Result<SubgradientSample> {
    let fx = problem.grad_x_f(x, y, b, s[0])?;
    let gy = problem.grad_x_g(x, y, b, s[1])?;
    let gz = problem.grad_x_g(x, z, b, s[2])?;
    combine_phi_x(&fx, &gy, &gz, coeffs)
}

fn dump(x: &ParamVector, y: &ParamVector, z: &ParamVector, dir: &[f64]) -> String {
    serde_json::json!({ "x": x.as_slice(), "y": y.as_slice(), "z": z.as_slice(), "direction": dir }).to_string()
}

fn estimate_error(e: Error, wrap: impl FnOnce() -> Error) -> Error {
    match e {
        Error::NonFiniteParam { .. } => wrap(),
        other => other,
    }
}

/// `K` inner steps at fixed `x`, outer index `t` selecting the random streams.
pub fn run_inner_loop<P: BilevelProblem + ?Sized>(
    x: &ParamVector,
    y0: &ParamVector,
    z0: &ParamVector,
    cfg: &CbsoConfig,
    problem: &P,
    t: usize,
) -> Result<InnerOutcome> {
    let (mut y, mut z) = (y0.clone(), z0.clone());
    let mut trace = Vec::with_capacity(cfg.inner_iters);
    for k in 0..cfg.inner_iters {
        let beta = cfg.inner_schedule.step(k);
        let sy = streams(cfg.seed, ["inner.y.f", "inner.y.g", "inner.y.h"], t, k);
        let sz = if cfg.share_inner_batches {
            [sy[1], sy[2]]
        } else {
            let s = streams(cfg.seed, ["inner.z.g", "inner.z.h", "unused"], t, k);
            [s[0], s[1]]
        };
        let non_finite = |stage: &'static str, dir: &[f64]| Error::NonFiniteIterate {
            stage,
            t,
            k,
            dump: dump(x, &y, &z, dir),
        };
        let d1 = subgrad_y_h1_hat(problem, x, &y, &cfg.coeffs, cfg.batch_size, sy)
            .map_err(|e| estimate_error(e, || non_finite("inner.y.estimate", &[])))?;
        let d2 = subgrad_y_h2_hat(problem, x, &z, &cfg.coeffs, cfg.batch_size, sz)
            .map_err(|e| estimate_error(e, || non_finite("inner.z.estimate", &[])))?;
        let y_next = y.descend(beta, d1.vector.as_slice()).map_err(|_| non_finite("inner.y", d1.vector.as_slice()))?;
        let z_next = z.descend(beta, d2.vector.as_slice()).map_err(|_| non_finite("inner.z", d2.vector.as_slice()))?;
        trace.push(InnerRecord {
            t,
            k,
            inner_step: beta,
            h1_estimate: d1.value,
            h2_estimate: d2.value,
            tau_y: d1.tau.unwrap_or(0.0),
            tau_z: d2.tau.unwrap_or(0.0),
        });
        y = y_next;
        z = z_next;
    }
    Ok(InnerOutcome { y, z, trace })
}

fn project(x: ParamVector, bx: &[(f64, f64)]) -> Result<ParamVector> {
    if bx.len() != x.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: bx.len() });
    }
    ParamVector::new(x.as_slice().iter().zip(bx).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect())
}

/// Receives log rows and checkpoints as the run progresses.
pub trait RunObserver {
    fn on_record(&mut self, _record: &RunRecord) -> Result<()> {
        Ok(())
    }
    fn on_inner(&mut self, _record: &InnerRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

pub fn run_cbso<P: BilevelProblem + ?Sized>(
    cfg: &CbsoConfig,
    problem: &P,
    x0: ParamVector,
    y0: ParamVector,
    z0: ParamVector,
) -> Result<CbsoState> {
    run_cbso_observed(cfg, problem, x0, y0, z0, &mut ())
}

pub fn run_cbso_observed<P: BilevelProblem + ?Sized>(
    cfg: &CbsoConfig,
    problem: &P,
    x0: ParamVector,
    y0: ParamVector,
    z0: ParamVector,
    observer: &mut dyn RunObserver,
) -> Result<CbsoState> {
    cfg.validate()?;
    for (name, got, expected) in [
        ("x0", x0.dim(), problem.x_dim()),
        ("y0", y0.dim(), problem.y_dim()),
        ("z0", z0.dim(), problem.y_dim()),
    ] {
        if got != expected {
            return Err(Error::Config(format!("{name} has dimension {got}, problem expects {expected}")));
        }
    }
    let started = Instant::now();
    let phi_obj = cfg.probe.as_ref().and_then(|_| problem.phi_objective(&cfg.coeffs));
    let mut state = CbsoState {
        x: x0,
        y: y0.clone(),
        z: z0.clone(),
        t: 0,
        log: Vec::with_capacity(cfg.outer_iters),
        inner_log: Vec::new(),
    };
    for t in 0..cfg.outer_iters {
        let (ys, zs) = if cfg.warm_start_inner || t == 0 {
            (state.y.clone(), state.z.clone())
        } else {
            (y0.clone(), z0.clone())
        };
        let inner = run_inner_loop(&state.x, &ys, &zs, cfg, problem, t)?;
        if cfg.log_inner {
            for r in &inner.trace {
                observer.on_inner(r)?;
            }
            state.inner_log.extend(inner.trace.iter().cloned());
        }
        let k = cfg.inner_iters;
        let sx = streams(cfg.seed, ["outer.x.f", "outer.x.g.y", "outer.x.g.z"], t, k);
        let dphi = grad_x_phi_hat(problem, &state.x, &inner.y, &inner.z, &cfg.coeffs, cfg.batch_size, sx)
            .map_err(|e| {
                estimate_error(e, || Error::NonFiniteIterate {
                    stage: "outer.x.estimate",
                    t,
                    k,
                    dump: dump(&state.x, &inner.y, &inner.z, &[]),
                })
            })?;
        let eval = problem.evaluate(&state.x, &inner.y, &inner.z, RngStreamSpec::derive(cfg.seed, "eval", 0, 0))?;
        let h1 = h1_value(eval.f_y, eval.g_y, cfg.coeffs.hinge(eval.h_y), &cfg.coeffs);
        let h2 = h2_value(eval.g_z, cfg.coeffs.hinge(eval.h_z), &cfg.coeffs);
        let (mut env_norm, mut env_res) = (None, None);
        if let (Some(pc), Some(obj)) = (&cfg.probe, &phi_obj) {
            if t % pc.every == 0 {
                let probe = prox_point(obj.as_ref(), state.x.as_slice(), pc.lambda, &pc.solver)?;
                env_norm = Some(probe.envelope_grad_norm);
                env_res = Some(probe.residual);
            }
        }
        let eta = cfg.outer_schedule.step(t);
        let x_next = state.x.descend(eta, dphi.vector.as_slice()).map_err(|_| Error::NonFiniteIterate {
            stage: "outer.x",
            t,
            k,
            dump: dump(&state.x, &inner.y, &inner.z, dphi.vector.as_slice()),
        })?;
        let x_next = match problem.x_domain() {
            Some(bx) if cfg.project_x => project(x_next, bx)?,
            _ => x_next,
        };
        for (name, v) in [("h1", h1.value), ("h2", h2.value), ("h", eval.h_y)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteIterate {
                    stage: if name == "h" { "eval.h" } else { "eval.h12" },
                    t,
                    k,
                    dump: dump(&state.x, &inner.y, &inner.z, dphi.vector.as_slice()),
                });
            }
        }
        let record = RunRecord {
            t,
            phi_hat_grad_norm: dphi.vector.norm(),
            h_of_y: eval.h_y,
            h1_value: h1.value,
            h2_value: h2.value,
            envelope_grad_norm: env_norm,
            envelope_residual: env_res,
            outer_step: eta,
            x: state.x.as_slice().to_vec(),
            wall_clock_ms: if cfg.record_wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        observer.on_record(&record)?;
        state.log.push(record);
        state.x = x_next;
        state.y = inner.y;
        state.z = inner.z;
        state.t = t + 1;
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && state.t.is_multiple_of(every) {
                observer.on_checkpoint(&Checkpoint {
                    t: state.t as u64,
                    x: state.x.clone(),
                    y: state.y.clone(),
                    z: state.z.clone(),
                })?;
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalty::validate_penalty_coefficients;
    use crate::synthetic::{make_problem, NoiseLevels};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn config(t: usize, k: usize, b: usize) -> CbsoConfig {
        CbsoConfig {
            outer_iters: t,
            inner_iters: k,
            batch_size: b,
            horizon: 1,
            coeffs: validate_penalty_coefficients(0.1, 0.01, 1.0, 0.0).unwrap(),
            outer_schedule: StepSchedule::outer_power(0.02, 0.5).unwrap(),
            inner_schedule: StepSchedule::inner_harmonic(0.02).unwrap(),
            warm_start_inner: true,
            project_x: false,
            share_inner_batches: false,
            seed: 7,
            probe: None,
            log_inner: true,
            checkpoint_every: None,
            record_wall_clock: false,
        }
    }

    /// Flat problem: every gradient and value is zero.
    struct Flat;
    impl BilevelProblem for Flat {
        fn x_dim(&self) -> usize {
            2
        }
        fn y_dim(&self) -> usize {
            2
        }
        fn c0(&self) -> f64 {
            0.0
        }
        fn grad_y_f(&self, _: &ParamVector, _: &ParamVector, _: usize, _: RngStreamSpec) -> Result<SubgradientSample> {
            Ok(SubgradientSample::zeros(2))
        }
        fn grad_y_g(&self, _: &ParamVector, _: &ParamVector, _: usize, _: RngStreamSpec) -> Result<SubgradientSample> {
            Ok(SubgradientSample::zeros(2))
        }
        fn subgrad_y_hplus(&self, _: &ParamVector, _: usize, _: RngStreamSpec) -> Result<SubgradientSample> {
            Ok(SubgradientSample::zeros(2))
        }
        fn grad_x_f(&self, _: &ParamVector, _: &ParamVector, _: usize, _: RngStreamSpec) -> Result<SubgradientSample> {
            Ok(SubgradientSample::zeros(2))
        }
        fn grad_x_g(&self, _: &ParamVector, _: &ParamVector, _: usize, _: RngStreamSpec) -> Result<SubgradientSample> {
            Ok(SubgradientSample::zeros(2))
        }
        fn evaluate(&self, _: &ParamVector, _: &ParamVector, _: &ParamVector, _: RngStreamSpec) -> Result<Evaluation> {
            Ok(Evaluation { f_y: 0.0, g_y: 0.0, g_z: 0.0, h_y: 0.0, h_z: 0.0 })
        }
    }

    #[test]
    fn flat_problem_keeps_iterates() {
        let cfg = config(1, 3, 1);
        let s = run_cbso(&cfg, &Flat, pv(&[1.0, 2.0]), pv(&[0.5, 0.5]), pv(&[-1.0, 0.0])).unwrap();
        assert_eq!(s.x, pv(&[1.0, 2.0]));
        assert_eq!(s.y, pv(&[0.5, 0.5]));
        assert_eq!(s.z, pv(&[-1.0, 0.0]));
        assert_eq!(s.log.len(), 1);
    }

    #[test]
    fn zero_inner_step_returns_start() {
        let p = make_problem("P1").unwrap();
        let mut cfg = config(1, 1, 4);
        cfg.inner_schedule = StepSchedule::Constant { c_a: 0.0 };
        let out = run_inner_loop(&pv(&[0.5]), &pv(&[0.3]), &pv(&[0.4]), &cfg, &p, 0).unwrap();
        assert_eq!((out.y, out.z), (pv(&[0.3]), pv(&[0.4])));
    }

    #[test]
    fn schedule_compliance_and_determinism() {
        let p = make_problem("P1").unwrap();
        let cfg = config(5, 20, 8);
        let a = run_cbso(&cfg, &p, pv(&[0.5]), pv(&[0.5]), pv(&[0.5])).unwrap();
        let b = run_cbso(&cfg, &p, pv(&[0.5]), pv(&[0.5]), pv(&[0.5])).unwrap();
        assert_eq!(a, b);
        for r in &a.log {
            assert_eq!(r.outer_step.to_bits(), (0.02 / ((1 + r.t) as f64).powf(0.5)).to_bits());
        }
        for r in &a.inner_log {
            assert_eq!(r.inner_step.to_bits(), (0.02 / (r.k + 1) as f64).to_bits());
        }
        assert!(a.log.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn inner_loop_reaches_grid_minimizer() {
        // P2 at x = -0.5: h1 is strongly convex near the feasible minimizer
        let p = make_problem("P2").unwrap().with_noise(NoiseLevels { f: 0.1, g: 0.1, h: 0.1 });
        let mut cfg = config(1, 200, 64);
        cfg.inner_schedule = StepSchedule::inner_harmonic(0.2).unwrap();
        let x = pv(&[-0.5]);
        let out = run_inner_loop(&x, &pv(&[0.0]), &pv(&[0.0]), &cfg, &p, 0).unwrap();
        let (y_star, _) = crate::synthetic::inner_minimize(&p, &cfg.coeffs, crate::synthetic::InnerTarget::H1, x.as_slice(), 1e-3, 0.0).unwrap();
        assert!((out.y.as_slice()[0] - y_star[0]).abs() < 1e-2, "{:?} vs {y_star:?}", out.y);
    }

    #[test]
    fn non_finite_iterate_aborts() {
        let p = make_problem("P1").unwrap();
        let mut cfg = config(1, 2, 1);
        cfg.inner_schedule = StepSchedule::inner_harmonic(1e300).unwrap();
        let err = run_cbso(&cfg, &p, pv(&[0.5]), pv(&[3.0]), pv(&[0.5])).unwrap_err();
        assert!(matches!(err, Error::NonFiniteIterate { .. }), "{err:?}");
    }

    #[test]
    fn projection_clamps_to_box() {
        let p = make_problem("P2").unwrap();
        let mut cfg = config(30, 20, 8);
        cfg.outer_schedule = StepSchedule::outer_power(5.0, 0.5).unwrap();
        cfg.project_x = true;
        let s = run_cbso(&cfg, &p, pv(&[0.5]), pv(&[0.0]), pv(&[0.0])).unwrap();
        assert!(s.log.iter().all(|r| (-1.5..=1.5).contains(&r.x[0])));
        assert!((-1.5..=1.5).contains(&s.x.as_slice()[0]));
    }

    #[test]
    fn checkpoints_emitted() {
        struct Sink(Vec<u64>);
        impl RunObserver for Sink {
            fn on_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
                self.0.push(c.t);
                Ok(())
            }
        }
        let p = make_problem("P1").unwrap();
        let mut cfg = config(6, 20, 2);
        cfg.checkpoint_every = Some(2);
        let mut sink = Sink(vec![]);
        run_cbso_observed(&cfg, &p, pv(&[0.5]), pv(&[0.5]), pv(&[0.5]), &mut sink).unwrap();
        assert_eq!(sink.0, vec![2, 4, 6]);
    }
}
