//! Nonlinear conjugate-gradient shooting.
//!
//! Starting from `alpha = 0, z0 = 0`, the controls are updated along Polak–Ribière (PR+)
//! directions with an Armijo backtracking line search. In constrained mode only `alpha` is
//! optimized and `z0 = -alpha ∇q0(x0)` is derived from it at every evaluation.

use serde::{Deserialize, Serialize};

use crate::adjoint::{
    constrained_momenta, default_ridge, gradient_from_trajectory, norm, reduce_constrained, GradientReport,
    Preconditioner,
};
use crate::dynamics::{dot, shoot, Controls, SolverConfig, Trajectory};
use crate::error::{Error, Result};
use crate::image_field::Intensity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Stop once the gradient norm falls below `grad_tol` times its initial value.
    pub grad_tol: f64,
    /// Stop once an accepted step lowers the energy by less than `energy_tol` relative.
    pub energy_tol: f64,
    pub constrained: bool,
    pub preconditioned: bool,
    /// Ridge added to the Gram matrices; `None` means `1e-6 · N`.
    pub ridge: Option<f64>,
    pub ls_shrink: f64,
    pub ls_c1: f64,
    pub ls_max_evals: usize,
    /// Iterations between forced steepest-descent restarts; `None` means the number of
    /// unknowns capped at 50.
    pub cg_restart: Option<usize>,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            energy_tol: 1e-12,
            constrained: false,
            preconditioned: false,
            ridge: None,
            ls_shrink: 0.5,
            ls_c1: 1e-4,
            ls_max_evals: 30,
            cg_restart: None,
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return bad("grad_tol must be positive");
        }
        if !(self.energy_tol > 0.0 && self.energy_tol.is_finite()) {
            return bad("energy_tol must be positive");
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return bad("ls_shrink must lie in (0, 1)");
        }
        if !(self.ls_c1 > 0.0 && self.ls_c1 < 1.0) {
            return bad("ls_c1 must lie in (0, 1)");
        }
        if self.ls_max_evals == 0 {
            return bad("ls_max_evals must be positive");
        }
        if self.cg_restart == Some(0) {
            return bad("cg_restart must be positive");
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return bad("ridge must be >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    ConvergedGrad,
    ConvergedEnergy,
    MaxIters,
    LineSearchFailed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::ConvergedGrad => "converged_grad",
            Status::ConvergedEnergy => "converged_energy",
            Status::MaxIters => "max_iters",
            Status::LineSearchFailed => "line_search_failed",
        }
    }

    pub fn is_converged(self) -> bool {
        matches!(self, Status::ConvergedGrad | Status::ConvergedEnergy)
    }
}

/// One line of the iteration log. `status` is `"running"` until the final record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub energy: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub controls: Controls,
    /// Energy at the start and after every accepted step.
    pub energy_history: Vec<f64>,
    /// Norm of the raw gradient, aligned with `energy_history`.
    pub grad_norm_history: Vec<f64>,
    pub iterations: usize,
    pub status: Status,
    /// Gradient report at the returned controls.
    pub report: GradientReport,
}

impl OptimResult {
    pub fn energy(&self) -> f64 {
        self.report.energy
    }
}

/// Armijo sufficient-decrease test.
pub fn step_accept(prev_energy: f64, trial_energy: f64, directional_derivative: f64, step: f64, c1: f64) -> bool {
    trial_energy.is_finite() && trial_energy <= prev_energy + c1 * step * directional_derivative
}

/// Objective restricted to the optimization variables.
struct Problem<'a, A: ?Sized, B: ?Sized> {
    template: &'a A,
    target: &'a B,
    x0: &'a [f64],
    m0: &'a [f64],
    config: &'a SolverConfig,
    dim: usize,
    constrained: bool,
    precond: Option<Preconditioner>,
}

/// Variables, energy and (raw, preconditioned) gradient at an accepted point.
struct Point {
    u: Vec<f64>,
    report: GradientReport,
    grad: Vec<f64>,
    pgrad: Vec<f64>,
}

impl<A: Intensity + ?Sized, B: Intensity + ?Sized> Problem<'_, A, B> {
    fn n(&self) -> usize {
        self.m0.len()
    }

    fn controls(&self, u: &[f64]) -> Controls {
        let n = self.n();
        if self.constrained {
            Controls { dim: self.dim, alpha: u.to_vec(), z0: constrained_momenta(u, self.x0, self.template) }
        } else {
            let (z0, alpha) = u.split_at(n * self.dim);
            Controls { dim: self.dim, alpha: alpha.to_vec(), z0: z0.to_vec() }
        }
    }

    fn shoot(&self, u: &[f64]) -> Result<(Trajectory, f64)> {
        let traj = shoot(self.x0, self.m0, &self.controls(u), self.config)?;
        let e = crate::adjoint::energy(&traj, self.target)?;
        Ok((traj, e))
    }

    fn finish(&self, u: Vec<f64>, traj: &Trajectory) -> Result<Point> {
        let alpha = if self.constrained { u.clone() } else { u[self.n() * self.dim..].to_vec() };
        let report = gradient_from_trajectory(traj, &alpha, self.config, self.target)?;
        let grad = if self.constrained {
            reduce_constrained(&report, self.x0, self.template)
        } else {
            [report.grad_z0.as_slice(), report.grad_alpha.as_slice()].concat()
        };
        let pgrad = match &self.precond {
            None => grad.clone(),
            Some(p) if self.constrained => p.apply_alpha(&grad),
            Some(p) => {
                let (gz, ga) = grad.split_at(self.n() * self.dim);
                [p.apply_z(gz), p.apply_alpha(ga)].concat()
            }
        };
        Ok(Point { u, report, grad, pgrad })
    }
}

/// Runs the matching loop without logging.
pub fn run(
    template: &(impl Intensity + ?Sized),
    target: &(impl Intensity + ?Sized),
    x0: &[f64],
    m0: &[f64],
    config: &SolverConfig,
    opts: &OptimOptions,
) -> Result<OptimResult> {
    run_with_observer(template, target, x0, m0, config, opts, |_| {})
}

/// Runs the matching loop, calling `observe` once per accepted iterate and once at the end.
pub fn run_with_observer(
    template: &(impl Intensity + ?Sized),
    target: &(impl Intensity + ?Sized),
    x0: &[f64],
    m0: &[f64],
    config: &SolverConfig,
    opts: &OptimOptions,
    mut observe: impl FnMut(&IterRecord),
) -> Result<OptimResult> {
    opts.validate()?;
    config.validate()?;
    let dim = template.dim();
    if target.dim() != dim {
        return Err(Error::DimensionMismatch("template and target dimensions differ".into()));
    }
    let n = m0.len();
    if n == 0 || x0.len() != n * dim {
        return Err(Error::DimensionMismatch(format!(
            "{} coordinates for {n} particles in {dim} dimensions",
            x0.len()
        )));
    }
    let precond = if opts.preconditioned {
        Some(Preconditioner::new(x0, dim, config, opts.ridge.unwrap_or_else(|| default_ridge(n)))?)
    } else {
        None
    };
    let problem = Problem { template, target, x0, m0, config, dim, constrained: opts.constrained, precond };
    let unknowns = if opts.constrained { n } else { n * (dim + 1) };
    let restart_every = opts.cg_restart.unwrap_or(unknowns.min(50));

    let u0 = vec![0.0; unknowns];
    let (traj, _) = problem.shoot(&u0)?;
    let mut point = problem.finish(u0, &traj)?;
    let mut energy_history = vec![point.report.energy];
    let g0 = norm(&point.grad);
    let mut grad_norm_history = vec![g0];
    let record = |iter: usize, p: &Point, step: f64, status: Option<Status>| IterRecord {
        iter,
        energy: p.report.energy,
        grad_norm: norm(&p.grad),
        step,
        status: status.map_or("running", Status::as_str).to_string(),
    };

    let finish = |point: Point, eh, gh, iterations, status| OptimResult {
        controls: problem.controls(&point.u),
        energy_history: eh,
        grad_norm_history: gh,
        iterations,
        status,
        report: point.report,
    };

    if g0 == 0.0 {
        observe(&record(0, &point, 0.0, Some(Status::ConvergedGrad)));
        return Ok(finish(point, energy_history, grad_norm_history, 0, Status::ConvergedGrad));
    }
    observe(&record(0, &point, 0.0, None));

    let mut direction: Vec<f64> = point.pgrad.iter().map(|g| -g).collect();
    let mut since_restart = 0;
    let mut last_step: Option<f64> = None;
    let mut status = Status::MaxIters;
    let mut iterations = 0;

    for iter in 1..=opts.max_iters {
        let mut dd = dot(&point.grad, &direction);
        let mut steepest = false;
        if !(dd < 0.0) || since_restart >= restart_every {
            direction = point.pgrad.iter().map(|g| -g).collect();
            dd = dot(&point.grad, &direction);
            since_restart = 0;
            steepest = true;
        }
        let first_step = last_step.map_or(1.0 / (1.0 + norm(&point.grad)), |s| 2.0 * s);

        let accepted = loop {
            if let Some(hit) = line_search(&problem, &point, &direction, dd, first_step, opts)? {
                break Some(hit);
            }
            if steepest {
                break None;
            }
            direction = point.pgrad.iter().map(|g| -g).collect();
            dd = dot(&point.grad, &direction);
            since_restart = 0;
            steepest = true;
        };
        let Some((step, next)) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };

        iterations = iter;
        last_step = Some(step);
        let prev_energy = point.report.energy;
        let beta_den = dot(&point.grad, &point.pgrad);
        let beta_num = dot(&next.grad, &next.pgrad) - dot(&next.grad, &point.pgrad);
        let beta = if beta_den > 0.0 { (beta_num / beta_den).max(0.0) } else { 0.0 };
        direction = next.pgrad.iter().zip(&direction).map(|(g, d)| -g + beta * d).collect();
        since_restart += 1;
        point = next;

        let g = norm(&point.grad);
        energy_history.push(point.report.energy);
        grad_norm_history.push(g);
        if g <= opts.grad_tol * g0 {
            status = Status::ConvergedGrad;
            break;
        }
        if prev_energy - point.report.energy <= opts.energy_tol * prev_energy {
            status = Status::ConvergedEnergy;
            break;
        }
        if iter < opts.max_iters {
            observe(&record(iter, &point, step, None));
        }
    }
    observe(&record(iterations, &point, last_step.unwrap_or(0.0), Some(status)));
    Ok(finish(point, energy_history, grad_norm_history, iterations, status))
}

/// Armijo backtracking along `direction`. Trial shots that diverge count as rejections.
fn line_search<A: Intensity + ?Sized, B: Intensity + ?Sized>(
    problem: &Problem<'_, A, B>,
    point: &Point,
    direction: &[f64],
    dd: f64,
    first_step: f64,
    opts: &OptimOptions,
) -> Result<Option<(f64, Point)>> {
    let mut step = first_step;
    for _ in 0..opts.ls_max_evals {
        let trial: Vec<f64> = point.u.iter().zip(direction).map(|(u, d)| u + step * d).collect();
        match problem.shoot(&trial) {
            Ok((traj, e)) if step_accept(point.report.energy, e, dd, step, opts.ls_c1) => {
                return Ok(Some((step, problem.finish(trial, &traj)?)));
            }
            Ok(_) | Err(Error::Divergence { .. }) => {}
            Err(e) => return Err(e),
        }
        step *= opts.ls_shrink;
    }
    Ok(None)
}
