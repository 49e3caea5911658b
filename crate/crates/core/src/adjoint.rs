//! Matching energy and its exact gradient with respect to the shooting controls.
//!
//! The backward pass is the discrete adjoint of the RK4 scheme used by
//! [`shoot`](crate::dynamics::shoot): each step transposes the four stage evaluations in
//! reverse order, so the gradient agrees with finite differences of the discrete objective
//! up to round-off. The vector-Jacobian product of the right-hand side is assembled from
//! analytic kernel derivatives:
//!
//! ```text
//! g_z[k]     +=  Σ_l K_V a_x[l] - ∇₁K_V((a_z[k] - a_z[l]) · ) z_l
//! g_alpha[k] +=  Σ_l K_H a_m[l] - σ⁻² alpha_l ∇₁K_H · (a_z[k] - a_z[l])
//! g_x[k]     +=  Σ_l (a_x[k]·z_l + a_x[l]·z_k) ∇₁K_V + (a_m[k] alpha_l + a_m[l] alpha_k) ∇₁K_H
//!               - (z_k·z_l) D²₁₁K_V (a_z[k] - a_z[l]) - σ⁻² alpha_k alpha_l D²₁₁K_H (a_z[k] - a_z[l])
//! ```
//!
//! No term depends on `m`, so `xi_m` is constant in time.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dynamics::{dot, rk4_step_with_stages, shoot, Controls, ParticleState, SolverConfig, Trajectory};
use crate::error::{Error, Result};
use crate::image_field::Intensity;
use crate::kernels::gram_matrix;

/// Covectors dual to `(x, z, m)` plus the accumulated dual of `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    pub dim: usize,
    pub xi_x: Vec<f64>,
    pub xi_z: Vec<f64>,
    pub xi_m: Vec<f64>,
    pub eta_alpha: Vec<f64>,
}

impl AdjointState {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { dim, xi_x: vec![0.0; n * dim], xi_z: vec![0.0; n * dim], xi_m: vec![0.0; n], eta_alpha: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.xi_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi_m.is_empty()
    }

    fn as_cotangent(&self) -> ParticleState {
        ParticleState { dim: self.dim, x: self.xi_x.clone(), m: self.xi_m.clone(), z: self.xi_z.clone() }
    }

    fn from_cotangent(c: ParticleState, eta_alpha: Vec<f64>) -> Self {
        Self { dim: c.dim, xi_x: c.x, xi_z: c.z, xi_m: c.m, eta_alpha }
    }

    fn is_finite(&self) -> bool {
        self.xi_x.iter().chain(&self.xi_z).chain(&self.xi_m).chain(&self.eta_alpha).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub energy: f64,
    pub grad_z0: Vec<f64>,
    pub grad_alpha: Vec<f64>,
    /// `|z_k(1) + alpha_k ∇q1(x_k(1))|` per particle.
    pub bc_residual: Vec<f64>,
    /// `max bc_residual / (max |alpha| · max |∇q1(x_k(1))| + 1e-12)`.
    pub bc_normalized: f64,
}

/// Compact JSON view of a [`GradientReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    pub energy: f64,
    pub grad_z0_norm: f64,
    pub grad_alpha_norm: f64,
    pub max_bc_residual: f64,
    pub bc_normalized: f64,
}

impl GradientReport {
    pub fn summary(&self) -> GradientSummary {
        GradientSummary {
            energy: self.energy,
            grad_z0_norm: norm(&self.grad_z0),
            grad_alpha_norm: norm(&self.grad_alpha),
            max_bc_residual: self.bc_residual.iter().copied().fold(0.0, f64::max),
            bc_normalized: self.bc_normalized,
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_target(traj: &Trajectory, target: &(impl Intensity + ?Sized)) -> Result<()> {
    if traj.initial().dim != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "particles live in {} dimensions but the image in {}",
            traj.initial().dim,
            target.dim()
        )));
    }
    Ok(())
}

/// `E = Σ_k (m_k(1) - q1(x_k(1)))²`.
pub fn energy(traj: &Trajectory, target: &(impl Intensity + ?Sized)) -> Result<f64> {
    check_target(traj, target)?;
    let last = traj.last();
    Ok((0..last.len())
        .map(|k| {
            let e = last.m[k] - target.value(last.position(k));
            e * e
        })
        .sum())
}

/// Differential of the energy with respect to the final state:
/// `xi_x = -2 e_k ∇q1(x_k(1))`, `xi_m = 2 e_k`, `xi_z = 0`.
pub fn terminal_adjoint(traj: &Trajectory, target: &(impl Intensity + ?Sized)) -> Result<AdjointState> {
    check_target(traj, target)?;
    let last = traj.last();
    let d = last.dim;
    let mut adj = AdjointState::zeros(last.len(), d);
    let mut g = [0.0; 3];
    for k in 0..last.len() {
        let p = last.position(k);
        let e = last.m[k] - target.value(p);
        target.gradient(p, &mut g[..d]);
        adj.xi_m[k] = 2.0 * e;
        for i in 0..d {
            adj.xi_x[k * d + i] = -2.0 * e * g[i];
        }
    }
    Ok(adj)
}

/// Transposed linearization of the right-hand side at `state`, applied to `cot`.
/// Returns the state cotangent and the `alpha` cotangent.
pub(crate) fn rhs_vjp(
    state: &ParticleState,
    alpha: &[f64],
    config: &SolverConfig,
    cot: &ParticleState,
) -> (ParticleState, Vec<f64>) {
    let d = state.dim;
    let n = state.len();
    let inv_s2 = config.inv_sigma2();
    let mut g = ParticleState::zeros(n, d);
    let mut g_alpha = cot.m.clone();
    g.z.copy_from_slice(&cot.x);

    let mut delta = [0.0; 3];
    let mut w = [0.0; 3];
    for k in 0..n {
        let xk = state.position(k);
        let zk = state.momentum(k);
        for l in (k + 1)..n {
            let xl = state.position(l);
            let zl = state.momentum(l);
            let (mut r2, mut zz, mut dw, mut axz) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..d {
                delta[i] = xk[i] - xl[i];
                w[i] = cot.z[k * d + i] - cot.z[l * d + i];
                r2 += delta[i] * delta[i];
                zz += zk[i] * zl[i];
                dw += delta[i] * w[i];
                axz += cot.x[k * d + i] * zl[i] + cot.x[l * d + i] * zk[i];
            }
            let v = config.kernel_v.radial_r2(r2);
            let h = config.kernel_h.radial_r2(r2);
            let aa = alpha[k] * alpha[l] * inv_s2;

            g_alpha[k] += h.value * cot.m[l] - inv_s2 * alpha[l] * h.d1 * dw;
            g_alpha[l] += h.value * cot.m[k] - inv_s2 * alpha[k] * h.d1 * dw;

            let grad_coef = axz * v.d1 + (cot.m[k] * alpha[l] + cot.m[l] * alpha[k]) * h.d1;
            let hess_diag = zz * v.d1 + aa * h.d1;
            let hess_rank1 = (zz * v.d2 + aa * h.d2) * dw;
            for i in 0..d {
                g.z[k * d + i] += v.value * cot.x[l * d + i] - v.d1 * dw * zl[i];
                g.z[l * d + i] += v.value * cot.x[k * d + i] - v.d1 * dw * zk[i];
                let gx = grad_coef * delta[i] - hess_diag * w[i] - hess_rank1 * delta[i];
                g.x[k * d + i] += gx;
                g.x[l * d + i] -= gx;
            }
        }
    }
    (g, g_alpha)
}

fn add_scaled(out: &mut ParticleState, s: f64, v: &ParticleState) {
    for (o, a) in out.x.iter_mut().zip(&v.x) {
        *o += s * a;
    }
    for (o, a) in out.m.iter_mut().zip(&v.m) {
        *o += s * a;
    }
    for (o, a) in out.z.iter_mut().zip(&v.z) {
        *o += s * a;
    }
}

fn scaled(s: f64, v: &ParticleState) -> ParticleState {
    let mut out = ParticleState::zeros(v.len(), v.dim);
    add_scaled(&mut out, s, v);
    out
}

/// Pulls the cotangent of `θ_{n+1}` back through one RK4 step from `θ_n`.
fn rk4_step_vjp(
    state: &ParticleState,
    alpha: &[f64],
    config: &SolverConfig,
    h: f64,
    lambda: &ParticleState,
    eta: &mut [f64],
) -> ParticleState {
    let stages = rk4_step_with_stages(state, alpha, config, h).stages;
    let mut out = lambda.clone();
    let mut accumulate_alpha = |ga: Vec<f64>| eta.iter_mut().zip(ga).for_each(|(e, g)| *e += g);

    // stage k4 = F(θ + h k3)
    let (mu4, ga) = rhs_vjp(&stages[3], alpha, config, &scaled(h / 6.0, lambda));
    accumulate_alpha(ga);
    add_scaled(&mut out, 1.0, &mu4);
    let mut ct3 = scaled(h / 3.0, lambda);
    add_scaled(&mut ct3, h, &mu4);

    // stage k3 = F(θ + h/2 k2)
    let (mu3, ga) = rhs_vjp(&stages[2], alpha, config, &ct3);
    accumulate_alpha(ga);
    add_scaled(&mut out, 1.0, &mu3);
    let mut ct2 = scaled(h / 3.0, lambda);
    add_scaled(&mut ct2, 0.5 * h, &mu3);

    // stage k2 = F(θ + h/2 k1)
    let (mu2, ga) = rhs_vjp(&stages[1], alpha, config, &ct2);
    accumulate_alpha(ga);
    add_scaled(&mut out, 1.0, &mu2);
    let mut ct1 = scaled(h / 6.0, lambda);
    add_scaled(&mut ct1, 0.5 * h, &mu2);

    let (mu1, ga) = rhs_vjp(&stages[0], alpha, config, &ct1);
    accumulate_alpha(ga);
    add_scaled(&mut out, 1.0, &mu1);
    out
}

/// Adjoint states at every stored time, index `i` holding the adjoint at `t_i`.
pub fn backprop_history(
    traj: &Trajectory,
    terminal: &AdjointState,
    alpha: &[f64],
    config: &SolverConfig,
) -> Result<Vec<AdjointState>> {
    let last = traj.last();
    if terminal.len() != last.len() || terminal.dim != last.dim || alpha.len() != last.len() {
        return Err(Error::DimensionMismatch(format!(
            "adjoint for {} particles in {} dimensions against a trajectory of {} particles in {}",
            terminal.len(),
            terminal.dim,
            last.len(),
            last.dim
        )));
    }
    if !terminal.is_finite() {
        return Err(Error::InvalidArgument("non-finite terminal adjoint".into()));
    }
    let steps = traj.timesteps();
    let mut history = vec![terminal.clone()];
    let mut lambda = terminal.as_cotangent();
    let mut eta = terminal.eta_alpha.clone();
    for n in (0..steps).rev() {
        lambda = rk4_step_vjp(&traj.states[n], alpha, config, traj.dt, &lambda, &mut eta);
        let adj = AdjointState::from_cotangent(lambda.clone(), eta.clone());
        if !adj.is_finite() {
            return Err(Error::Divergence { step: n });
        }
        history.push(adj);
    }
    history.reverse();
    Ok(history)
}

/// Integrates the adjoint system from `t = 1` back to `t = 0`.
pub fn backprop(traj: &Trajectory, terminal: &AdjointState, alpha: &[f64], config: &SolverConfig) -> Result<AdjointState> {
    Ok(backprop_history(traj, terminal, alpha, config)?.swap_remove(0))
}

/// Energy, gradients and boundary-condition residuals for a stored trajectory.
pub fn gradient_from_trajectory(
    traj: &Trajectory,
    alpha: &[f64],
    config: &SolverConfig,
    target: &(impl Intensity + ?Sized),
) -> Result<GradientReport> {
    let energy = energy(traj, target)?;
    let terminal = terminal_adjoint(traj, target)?;
    let start = backprop(traj, &terminal, alpha, config)?;

    let last = traj.last();
    let d = last.dim;
    let mut g = [0.0; 3];
    let mut max_grad: f64 = 0.0;
    let bc_residual: Vec<f64> = (0..last.len())
        .map(|k| {
            target.gradient(last.position(k), &mut g[..d]);
            max_grad = max_grad.max(norm(&g[..d]));
            let r: Vec<f64> = last.momentum(k).iter().zip(&g[..d]).map(|(z, gq)| z + alpha[k] * gq).collect();
            norm(&r)
        })
        .collect();
    let max_alpha = alpha.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let bc_normalized = bc_residual.iter().copied().fold(0.0, f64::max) / (max_alpha * max_grad + 1e-12);

    Ok(GradientReport { energy, grad_z0: start.xi_z, grad_alpha: start.eta_alpha, bc_residual, bc_normalized })
}

/// Shoots from the controls and returns the energy gradient with respect to `z0` and `alpha`.
pub fn gradient(
    x0: &[f64],
    m0: &[f64],
    controls: &Controls,
    config: &SolverConfig,
    target: &(impl Intensity + ?Sized),
) -> Result<GradientReport> {
    let traj = shoot(x0, m0, controls, config)?;
    gradient_from_trajectory(&traj, &controls.alpha, config, target)
}

/// Initial vector momenta tied to the scalar ones: `z_k = -alpha_k ∇q0(x_k)`.
pub fn constrained_momenta(alpha: &[f64], x0: &[f64], template: &(impl Intensity + ?Sized)) -> Vec<f64> {
    let d = template.dim();
    let mut g = [0.0; 3];
    x0.chunks_exact(d)
        .zip(alpha)
        .flat_map(|(p, a)| {
            template.gradient(p, &mut g[..d]);
            g[..d].iter().map(|gi| -a * gi).collect::<Vec<_>>()
        })
        .collect()
}

/// Total derivative of the energy with respect to `alpha` when `z0` follows
/// [`constrained_momenta`]: `grad_alpha_k - ∇q0(x_k)·grad_z0_k`.
pub fn reduce_constrained(report: &GradientReport, x0: &[f64], template: &(impl Intensity + ?Sized)) -> Vec<f64> {
    let d = template.dim();
    let mut g = [0.0; 3];
    x0.chunks_exact(d)
        .zip(report.grad_z0.chunks_exact(d))
        .zip(&report.grad_alpha)
        .map(|((p, gz), ga)| {
            template.gradient(p, &mut g[..d]);
            ga - dot(&g[..d], gz)
        })
        .collect()
}

/// Ridge used when none is given: `1e-6 · N`.
pub fn default_ridge(n: usize) -> f64 {
    1e-6 * n as f64
}

/// Factored Gram matrices of the initial particle grid, applying
/// `z ↦ (K_V + ridge I)⁻¹ z` per spatial component and `alpha ↦ (K_H + ridge I)⁻¹ alpha`.
pub struct Preconditioner {
    dim: usize,
    gram_v: Cholesky<f64, Dyn>,
    gram_h: Cholesky<f64, Dyn>,
}

impl Preconditioner {
    pub fn new(x0: &[f64], dim: usize, config: &SolverConfig, ridge: f64) -> Result<Self> {
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        let factor = |m: DMatrix<f64>| {
            let n = m.nrows();
            Cholesky::new(m + DMatrix::identity(n, n) * ridge).ok_or(Error::Conditioning { ridge })
        };
        Ok(Self {
            dim,
            gram_v: factor(gram_matrix(&config.kernel_v, x0, dim)?)?,
            gram_h: factor(gram_matrix(&config.kernel_h, x0, dim)?)?,
        })
    }

    pub fn apply_z(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let n = z.len() / d;
        let mut out = vec![0.0; z.len()];
        for c in 0..d {
            let col = DVector::from_iterator(n, (0..n).map(|k| z[k * d + c]));
            let solved = self.gram_v.solve(&col);
            for k in 0..n {
                out[k * d + c] = solved[k];
            }
        }
        out
    }

    pub fn apply_alpha(&self, alpha: &[f64]) -> Vec<f64> {
        self.gram_h.solve(&DVector::from_column_slice(alpha)).as_slice().to_vec()
    }
}

/// Gradients mapped through the inverse Gram matrices of the initial grid.
pub fn precondition(
    report: &GradientReport,
    x0: &[f64],
    config: &SolverConfig,
    ridge: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = report.grad_alpha.len();
    if n == 0 || report.grad_z0.len() % n != 0 {
        return Err(Error::DimensionMismatch("gradient report shapes".into()));
    }
    let pre = Preconditioner::new(x0, report.grad_z0.len() / n, config, ridge)?;
    Ok((pre.apply_z(&report.grad_z0), pre.apply_alpha(&report.grad_alpha)))
}
