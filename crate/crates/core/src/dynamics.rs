//! Forward particle system.
//!
//! For particles `k = 1..N` with positions `x_k`, template values `m_k`, vector momenta `z_k`
//! and constant scalar momenta `alpha_k`:
//!
//! ```text
//! ẋ_k = Σ_l K_V(x_k, x_l) z_l
//! ṁ_k = Σ_l K_H(x_k, x_l) alpha_l
//! ż_k = -Σ_l (z_l · z_k) ∇₁K_V(x_k, x_l) - σ⁻² Σ_l alpha_k alpha_l ∇₁K_H(x_k, x_l)
//! ```
//!
//! integrated on `[0, 1]` with fixed-step classical RK4. All pairwise sums are dense.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{dist2, KernelParams};

/// Positions, template values and vector momenta of `N` particles in `dim` dimensions.
///
/// `x` and `z` are row-major `N × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub dim: usize,
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    pub z: Vec<f64>,
}

impl ParticleState {
    pub fn new(dim: usize, x: Vec<f64>, m: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let state = Self { dim, x, m, z };
        state.validate()?;
        Ok(state)
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { dim, x: vec![0.0; n * dim], m: vec![0.0; n], z: vec![0.0; n * dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::InvalidArgument(format!("dimension must be 1, 2 or 3, got {}", self.dim)));
        }
        let n = self.m.len();
        if n == 0 {
            return Err(Error::InvalidArgument("particle state needs at least one particle".into()));
        }
        if self.x.len() != n * self.dim || self.z.len() != n * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "{n} particles need {} coordinates, got x: {}, z: {}",
                n * self.dim,
                self.x.len(),
                self.z.len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidArgument("non-finite particle state".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.m.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    #[inline]
    pub fn position(&self, k: usize) -> &[f64] {
        &self.x[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn momentum(&self, k: usize) -> &[f64] {
        &self.z[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.m).chain(&self.z).all(|v| v.is_finite())
    }

    /// `self + h * rate`, written into `out`.
    pub(crate) fn axpy_into(&self, h: f64, rate: &ParticleState, out: &mut ParticleState) {
        for (o, (a, b)) in out.x.iter_mut().zip(self.x.iter().zip(&rate.x)) {
            *o = a + h * b;
        }
        for (o, (a, b)) in out.m.iter_mut().zip(self.m.iter().zip(&rate.m)) {
            *o = a + h * b;
        }
        for (o, (a, b)) in out.z.iter_mut().zip(self.z.iter().zip(&rate.z)) {
            *o = a + h * b;
        }
    }
}

/// The shooting unknowns: scalar momenta `alpha` and initial vector momenta `z0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub dim: usize,
    pub alpha: Vec<f64>,
    pub z0: Vec<f64>,
}

impl Controls {
    pub fn new(dim: usize, alpha: Vec<f64>, z0: Vec<f64>) -> Result<Self> {
        if dim == 0 || z0.len() != alpha.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "controls: {} scalar momenta need {} vector momentum coordinates, got {}",
                alpha.len(),
                alpha.len() * dim,
                z0.len()
            )));
        }
        if alpha.iter().chain(&z0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite control".into()));
        }
        Ok(Self { dim, alpha, z0 })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { dim, alpha: vec![0.0; n], z0: vec![0.0; n * dim] }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub sigma: f64,
    pub timesteps: usize,
    pub kernel_v: KernelParams,
    pub kernel_h: KernelParams,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            timesteps: 10,
            kernel_v: KernelParams { tau: 1.5, family: crate::kernels::KernelFamily::V },
            kernel_h: KernelParams { tau: 0.5, family: crate::kernels::KernelFamily::H },
        }
    }
}

impl SolverConfig {
    pub fn new(sigma: f64, timesteps: usize, tau_v: f64, tau_h: f64) -> Result<Self> {
        let config = Self {
            sigma,
            timesteps,
            kernel_v: KernelParams::v(tau_v)?,
            kernel_h: KernelParams::h(tau_h)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.timesteps == 0 {
            return Err(Error::InvalidArgument("timesteps must be at least 1".into()));
        }
        self.kernel_v.validate()?;
        self.kernel_h.validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.timesteps as f64
    }

    pub(crate) fn inv_sigma2(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }
}

/// States at the `T + 1` uniform times `t_i = i dt`, `T dt = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<ParticleState>,
    pub dt: f64,
    pub sigma: f64,
}

impl Trajectory {
    pub fn timesteps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn initial(&self) -> &ParticleState {
        &self.states[0]
    }

    pub fn last(&self) -> &ParticleState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn time(&self, index: usize) -> f64 {
        if index == self.timesteps() {
            1.0
        } else {
            index as f64 * self.dt
        }
    }

    /// One row per (step, particle): `t,k,x0..,m,z0..` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let dim = self.initial().dim;
        let mut header = vec!["t".to_string(), "k".to_string()];
        header.extend((0..dim).map(|i| format!("x{i}")));
        header.push("m".into());
        header.extend((0..dim).map(|i| format!("z{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (step, state) in self.states.iter().enumerate() {
            let t = self.time(step);
            for k in 0..state.len() {
                write!(out, "{t:.16e},{k}")?;
                for v in state.position(k) {
                    write!(out, ",{v:.16e}")?;
                }
                write!(out, ",{:.16e}", state.m[k])?;
                for v in state.momentum(k) {
                    write!(out, ",{v:.16e}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

fn check_alpha(state: &ParticleState, alpha: &[f64]) -> Result<()> {
    if alpha.len() != state.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scalar momenta for {} particles",
            alpha.len(),
            state.len()
        )));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument("non-finite scalar momentum".into()));
    }
    Ok(())
}

/// Time derivative of the particle system, returned as a state-shaped rate.
pub fn rhs(state: &ParticleState, alpha: &[f64], config: &SolverConfig) -> Result<ParticleState> {
    state.validate()?;
    check_alpha(state, alpha)?;
    config.validate()?;
    let mut out = ParticleState::zeros(state.len(), state.dim);
    rhs_into(state, alpha, config, &mut out);
    Ok(out)
}

pub(crate) fn rhs_into(state: &ParticleState, alpha: &[f64], config: &SolverConfig, out: &mut ParticleState) {
    let d = state.dim;
    let n = state.len();
    let inv_s2 = config.inv_sigma2();
    out.x.copy_from_slice(&state.z);
    out.m.copy_from_slice(alpha);
    out.z.iter_mut().for_each(|v| *v = 0.0);
    let mut delta = [0.0; 3];
    for k in 0..n {
        let xk = state.position(k);
        let zk = state.momentum(k);
        for l in (k + 1)..n {
            let xl = state.position(l);
            let zl = state.momentum(l);
            let mut r2 = 0.0;
            let mut zz = 0.0;
            for i in 0..d {
                delta[i] = xk[i] - xl[i];
                r2 += delta[i] * delta[i];
                zz += zk[i] * zl[i];
            }
            let (kv, dv) = config.kernel_v.value_d1_r2(r2);
            let (kh, dh) = config.kernel_h.value_d1_r2(r2);
            out.m[k] += kh * alpha[l];
            out.m[l] += kh * alpha[k];
            let c = dv * zz + inv_s2 * dh * alpha[k] * alpha[l];
            for i in 0..d {
                out.x[k * d + i] += kv * zl[i];
                out.x[l * d + i] += kv * zk[i];
                out.z[k * d + i] -= c * delta[i];
                out.z[l * d + i] += c * delta[i];
            }
        }
    }
}

/// Stage inputs of one RK4 step together with the resulting state.
pub(crate) struct Rk4Step {
    pub stages: [ParticleState; 4],
    pub next: ParticleState,
}

pub(crate) fn rk4_step_with_stages(state: &ParticleState, alpha: &[f64], config: &SolverConfig, h: f64) -> Rk4Step {
    let n = state.len();
    let d = state.dim;
    let mut k = [(); 4].map(|_| ParticleState::zeros(n, d));
    let mut stages = [(); 4].map(|_| ParticleState::zeros(n, d));
    stages[0].clone_from(state);
    rhs_into(&stages[0], alpha, config, &mut k[0]);
    let factors = [0.5 * h, 0.5 * h, h];
    for s in 1..4 {
        let (done, rest) = k.split_at_mut(s);
        state.axpy_into(factors[s - 1], &done[s - 1], &mut stages[s]);
        rhs_into(&stages[s], alpha, config, &mut rest[0]);
    }
    let next = combine(state, h, &k);
    Rk4Step { stages, next }
}

fn combine(state: &ParticleState, h: f64, k: &[ParticleState; 4]) -> ParticleState {
    let w = h / 6.0;
    let mut next = state.clone();
    let mix = |o: &mut f64, a: f64, b: f64, c: f64, e: f64| *o += w * (a + 2.0 * b + 2.0 * c + e);
    for i in 0..next.x.len() {
        mix(&mut next.x[i], k[0].x[i], k[1].x[i], k[2].x[i], k[3].x[i]);
        mix(&mut next.z[i], k[0].z[i], k[1].z[i], k[2].z[i], k[3].z[i]);
    }
    for i in 0..next.m.len() {
        mix(&mut next.m[i], k[0].m[i], k[1].m[i], k[2].m[i], k[3].m[i]);
    }
    next
}

/// Integrates the particle system from `x0, m0` with the given controls over `[0, 1]`.
pub fn shoot(x0: &[f64], m0: &[f64], controls: &Controls, config: &SolverConfig) -> Result<Trajectory> {
    config.validate()?;
    let initial = ParticleState::new(controls.dim, x0.to_vec(), m0.to_vec(), controls.z0.clone())?;
    check_alpha(&initial, &controls.alpha)?;
    shoot_from(initial, &controls.alpha, config)
}

pub(crate) fn shoot_from(initial: ParticleState, alpha: &[f64], config: &SolverConfig) -> Result<Trajectory> {
    let h = config.dt();
    let n = initial.len();
    let d = initial.dim;
    let mut states = Vec::with_capacity(config.timesteps + 1);
    states.push(initial);
    let mut k = [(); 4].map(|_| ParticleState::zeros(n, d));
    let mut stage = ParticleState::zeros(n, d);
    for step in 0..config.timesteps {
        let current = &states[step];
        rhs_into(current, alpha, config, &mut k[0]);
        current.axpy_into(0.5 * h, &k[0], &mut stage);
        rhs_into(&stage, alpha, config, &mut k[1]);
        current.axpy_into(0.5 * h, &k[1], &mut stage);
        rhs_into(&stage, alpha, config, &mut k[2]);
        current.axpy_into(h, &k[2], &mut stage);
        rhs_into(&stage, alpha, config, &mut k[3]);
        let next = combine(current, h, &k);
        if !next.is_finite() {
            return Err(Error::Divergence { step: step + 1 });
        }
        states.push(next);
    }
    Ok(Trajectory { states, dt: h, sigma: config.sigma })
}

/// `½ zᵀ K_V(x) z + (1 / 2σ²) alphaᵀ K_H(x) alpha`, conserved along exact solutions.
pub fn hamiltonian(state: &ParticleState, alpha: &[f64], config: &SolverConfig) -> Result<f64> {
    check_alpha(state, alpha)?;
    let n = state.len();
    let mut kinetic = 0.0;
    let mut intensity = 0.0;
    for k in 0..n {
        let zk = state.momentum(k);
        kinetic += 0.5 * dot(zk, zk);
        intensity += 0.5 * alpha[k] * alpha[k];
        for l in (k + 1)..n {
            let r2 = dist2(state.position(k), state.position(l));
            kinetic += config.kernel_v.value_r2(r2) * dot(zk, state.momentum(l));
            intensity += config.kernel_h.value_r2(r2) * alpha[k] * alpha[l];
        }
    }
    Ok(kinetic + config.inv_sigma2() * intensity)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_points(state: &ParticleState, points: &[f64]) -> Result<()> {
    if points.len() % state.dim != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} query coordinates are not a multiple of dimension {}",
            points.len(),
            state.dim
        )));
    }
    Ok(())
}

/// Velocity field `v(y) = Σ_k K_V(y, x_k) z_k` at each query point.
pub fn velocity_at(state: &ParticleState, points: &[f64], config: &SolverConfig) -> Result<Vec<f64>> {
    check_points(state, points)?;
    let d = state.dim;
    let mut out = vec![0.0; points.len()];
    for (y, v) in points.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        velocity_at_point(state, &config.kernel_v, y, v);
    }
    Ok(out)
}

/// Intensity rate `ζ(y) = Σ_k K_H(y, x_k) alpha_k` at each query point.
pub fn intensity_rate_at(
    state: &ParticleState,
    points: &[f64],
    alpha: &[f64],
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    check_points(state, points)?;
    check_alpha(state, alpha)?;
    Ok(points
        .chunks_exact(state.dim)
        .map(|y| {
            (0..state.len())
                .map(|k| config.kernel_h.value_r2(dist2(y, state.position(k))) * alpha[k])
                .sum()
        })
        .collect())
}

#[inline]
pub(crate) fn velocity_at_point(state: &ParticleState, kernel: &KernelParams, y: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..state.len() {
        let kv = kernel.value_r2(dist2(y, state.position(k)));
        for (o, zk) in out.iter_mut().zip(state.momentum(k)) {
            *o += kv * zk;
        }
    }
}

/// Velocity and intensity rate at one point in a single pass over the particles.
#[inline]
pub(crate) fn flow_at_point(
    state: &ParticleState,
    alpha: &[f64],
    config: &SolverConfig,
    y: &[f64],
    velocity: &mut [f64],
) -> f64 {
    velocity.iter_mut().for_each(|v| *v = 0.0);
    let mut rate = 0.0;
    for k in 0..state.len() {
        let r2 = dist2(y, state.position(k));
        let kv = config.kernel_v.value_r2(r2);
        rate += config.kernel_h.value_r2(r2) * alpha[k];
        for (o, zk) in velocity.iter_mut().zip(state.momentum(k)) {
            *o += kv * zk;
        }
    }
    rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> (Vec<f64>, Vec<f64>, Controls) {
        let x0: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.0..spread)).collect();
        let m0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let alpha = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z0 = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (x0, m0, Controls::new(2, alpha, z0).unwrap())
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn stationary_single_particle() {
        let state = ParticleState::new(2, vec![1.0, 2.0], vec![0.5], vec![0.0, 0.0]).unwrap();
        let rate = rhs(&state, &[0.0], &SolverConfig::default()).unwrap();
        assert_eq!(rate, ParticleState::zeros(1, 2));
    }

    #[test]
    fn single_particle_moves_at_constant_velocity() {
        let state = ParticleState::new(2, vec![1.0, 2.0], vec![0.5], vec![0.3, -0.7]).unwrap();
        let rate = rhs(&state, &[0.25], &SolverConfig::default()).unwrap();
        assert_eq!(rate.x, vec![0.3, -0.7]);
        assert_eq!(rate.m, vec![0.25]);
        assert_eq!(rate.z, vec![0.0, 0.0]);
    }

    #[test]
    fn symmetric_pair_has_mirrored_rates() {
        let state = ParticleState::new(2, vec![-0.5, 0.0, 0.5, 0.0], vec![0.0, 0.0], vec![0.4, 0.0, -0.4, 0.0]).unwrap();
        let config = SolverConfig::default();
        let rate = rhs(&state, &[0.3, 0.3], &config).unwrap();
        assert!((rate.x[0] + rate.x[2]).abs() < 1e-15);
        assert!((rate.z[0] + rate.z[2]).abs() < 1e-15);
        assert_eq!(rate.x[1], 0.0);
        assert_eq!(rate.z[1], 0.0);
        // Hand evaluation: r = 1, z1·z2 = -0.16.
        let kv = config.kernel_v.eval(&[-0.5, 0.0], &[0.5, 0.0]).unwrap();
        assert!((rate.x[0] - (0.4 - kv * 0.4)).abs() < 1e-15);
        let gv = config.kernel_v.grad1(&[-0.5, 0.0], &[0.5, 0.0]).unwrap();
        let gh = config.kernel_h.grad1(&[-0.5, 0.0], &[0.5, 0.0]).unwrap();
        let expected = 0.16 * gv[0] - 0.09 * gh[0];
        assert!((rate.z[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let state = ParticleState::new(2, vec![0.0, 0.0], vec![0.0], vec![0.0, 0.0]).unwrap();
        assert!(rhs(&state, &[0.0, 1.0], &SolverConfig::default()).is_err());
        assert!(ParticleState::new(2, vec![0.0], vec![0.0], vec![0.0, 0.0]).is_err());
        assert!(Controls::new(2, vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn single_particle_closed_form() {
        let config = SolverConfig::default();
        let controls = Controls::new(2, vec![0.37], vec![0.8, -0.45]).unwrap();
        let traj = shoot(&[3.0, 4.0], &[0.2], &controls, &config).unwrap();
        assert_eq!(traj.states.len(), 11);
        for (i, s) in traj.states.iter().enumerate() {
            let t = traj.time(i);
            assert!((s.x[0] - (3.0 + 0.8 * t)).abs() < 1e-12);
            assert!((s.x[1] - (4.0 - 0.45 * t)).abs() < 1e-12);
            assert!((s.m[0] - (0.2 + 0.37 * t)).abs() < 1e-12);
            assert_eq!(s.z, vec![0.8, -0.45]);
        }
    }

    #[test]
    fn zero_controls_give_constant_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x0, m0, _) = random_problem(&mut rng, 6, 4.0);
        let traj = shoot(&x0, &m0, &Controls::zeros(6, 2), &SolverConfig::default()).unwrap();
        for s in &traj.states {
            assert_eq!(s, traj.initial());
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x0, m0, controls) = random_problem(&mut rng, 5, 3.0);
        let at = |t: usize| {
            let config = SolverConfig { timesteps: t, ..SolverConfig::default() };
            shoot(&x0, &m0, &controls, &config).unwrap().last().clone()
        };
        let reference = at(640);
        let err = |s: &ParticleState| max_abs_diff(&s.x, &reference.x).max(max_abs_diff(&s.z, &reference.z));
        let coarse = err(&at(10));
        let fine = err(&at(20));
        let ratio = coarse / fine;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn hamiltonian_simple_values() {
        let config = SolverConfig { sigma: 0.7, ..SolverConfig::default() };
        let zero = ParticleState::new(2, vec![0.0, 0.0, 1.0, 1.0], vec![0.0; 2], vec![0.0; 4]).unwrap();
        assert_eq!(hamiltonian(&zero, &[0.0, 0.0], &config).unwrap(), 0.0);
        let single = ParticleState::new(2, vec![0.0, 0.0], vec![0.0], vec![1.0, 0.0]).unwrap();
        assert!((hamiltonian(&single, &[0.7], &config).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hamiltonian_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [2, 8, 16] {
            let (x0, m0, controls) = random_problem(&mut rng, n, 4.0);
            let drift = |t: usize| {
                let config = SolverConfig { timesteps: t, ..SolverConfig::default() };
                let traj = shoot(&x0, &m0, &controls, &config).unwrap();
                let h0 = hamiltonian(traj.initial(), &controls.alpha, &config).unwrap();
                traj.states
                    .iter()
                    .map(|s| (hamiltonian(s, &controls.alpha, &config).unwrap() - h0).abs() / h0.max(1.0))
                    .fold(0.0, f64::max)
            };
            let d10 = drift(10);
            assert!(d10 < 1e-6, "n = {n}: drift {d10}");
            let ratio = d10 / drift(20);
            assert!(ratio > 8.0, "n = {n}: ratio {ratio}");
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x0, m0, controls) = random_problem(&mut rng, 7, 3.0);
        let config = SolverConfig::default();
        let a = shoot(&x0, &m0, &controls, &config).unwrap();
        let shifted: Vec<f64> = x0.chunks(2).flat_map(|p| [p[0] + 5.0, p[1] - 2.0]).collect();
        let b = shoot(&shifted, &m0, &controls, &config).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            for (pa, pb) in sa.x.chunks(2).zip(sb.x.chunks(2)) {
                assert!((pb[0] - pa[0] - 5.0).abs() < 1e-12);
                assert!((pb[1] - pa[1] + 2.0).abs() < 1e-12);
            }
            assert!(max_abs_diff(&sa.m, &sb.m) < 1e-12);
            assert!(max_abs_diff(&sa.z, &sb.z) < 1e-12);
        }
    }

    #[test]
    fn rhs_matches_time_derivative_of_shoot() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (x0, m0, controls) = random_problem(&mut rng, 4, 3.0);
        let state = ParticleState::new(2, x0.clone(), m0.clone(), controls.z0.clone()).unwrap();
        let config = SolverConfig::default();
        let rate = rhs(&state, &controls.alpha, &config).unwrap();
        let mut errs = vec![];
        for t in [100, 1000] {
            let cfg = SolverConfig { timesteps: t, ..config };
            let traj = shoot(&x0, &m0, &controls, &cfg).unwrap();
            let s1 = &traj.states[1];
            let fd: Vec<f64> = s1.x.iter().zip(&x0).map(|(a, b)| (a - b) / cfg.dt()).collect();
            errs.push(max_abs_diff(&fd, &rate.x));
        }
        assert!(errs[1] < errs[0] / 5.0);
        assert!(errs[1] < 1e-2);
    }

    #[test]
    fn field_evaluation() {
        let config = SolverConfig::default();
        let state = ParticleState::new(2, vec![1.0, 1.0], vec![0.0], vec![0.3, 0.4]).unwrap();
        assert_eq!(velocity_at(&state, &[1.0, 1.0], &config).unwrap(), vec![0.3, 0.4]);
        assert_eq!(intensity_rate_at(&state, &[1.0, 1.0], &[0.6], &config).unwrap(), vec![0.6]);
        let far = velocity_at(&state, &[500.0, -300.0], &config).unwrap();
        assert!(far.iter().all(|v| v.abs() < 1e-10));
        let far = intensity_rate_at(&state, &[500.0, -300.0], &[0.6], &config).unwrap();
        assert!(far[0].abs() < 1e-10);
        let still = ParticleState::new(2, vec![1.0, 1.0], vec![0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(velocity_at(&still, &[2.0, 0.0], &config).unwrap(), vec![0.0, 0.0]);
        assert_eq!(intensity_rate_at(&still, &[2.0, 0.0], &[0.0], &config).unwrap(), vec![0.0]);
        assert!(velocity_at(&state, &[1.0, 2.0, 3.0], &config).is_err());
    }

    #[test]
    fn csv_layout() {
        let config = SolverConfig { timesteps: 2, ..SolverConfig::default() };
        let controls = Controls::new(2, vec![0.5], vec![1.0, 0.0]).unwrap();
        let traj = shoot(&[0.0, 0.0], &[0.25], &controls, &config).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,k,x0,x1,m,z0,z1");
        assert_eq!(lines.len(), 4);
        let last: Vec<f64> = lines[3].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(last, vec![1.0, 0.0, 1.0, 0.0, 0.75, 1.0, 0.0]);
        assert!(lines[1].starts_with("0.0000000000000000e0,0,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_equivariance(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x0, m0, controls) = random_problem(&mut rng, n, 3.0);
            let perm: Vec<usize> = (0..n).rev().collect();
            let px: Vec<f64> = perm.iter().flat_map(|&k| x0[2 * k..2 * k + 2].to_vec()).collect();
            let pm: Vec<f64> = perm.iter().map(|&k| m0[k]).collect();
            let pa: Vec<f64> = perm.iter().map(|&k| controls.alpha[k]).collect();
            let pz: Vec<f64> = perm.iter().flat_map(|&k| controls.z0[2 * k..2 * k + 2].to_vec()).collect();
            let config = SolverConfig::default();
            let a = shoot(&x0, &m0, &controls, &config).unwrap();
            let b = shoot(&px, &pm, &Controls::new(2, pa, pz).unwrap(), &config).unwrap();
            let sa = a.last();
            let sb = b.last();
            for (j, &k) in perm.iter().enumerate() {
                prop_assert!((sa.m[k] - sb.m[j]).abs() < 1e-12);
                prop_assert!(max_abs_diff(sa.position(k), sb.position(j)) < 1e-12);
                prop_assert!(max_abs_diff(sa.momentum(k), sb.momentum(j)) < 1e-12);
            }
        }
    }
}
