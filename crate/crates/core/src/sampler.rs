//! Random scalar momenta around a set of learned ones.
//!
//! `alpha = mean + (c / √n) Σ_k ξ_k (alpha_k - mean)` with independent standard normal
//! `ξ_k`. With `c = 1` and `n = K` the covariance of the draws equals the (1/K-normalized)
//! empirical covariance of the `K` stored momenta.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::constrained_momenta;
use crate::dynamics::{shoot, Controls, SolverConfig};
use crate::error::{Error, Result};
use crate::image_field::ScalarField;
use crate::persist::{flatten, read_json, write_json, MomentaFile};
use crate::renderer::{RenderConfig, Renderer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSet {
    pub template_id: String,
    pub config: SolverConfig,
    pub dim: usize,
    /// Particle grid shared by every stored momentum, one row per particle.
    pub x0: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
}

impl MomentumSet {
    pub fn new(template_id: impl Into<String>, config: SolverConfig, dim: usize, x0: Vec<Vec<f64>>, alphas: Vec<Vec<f64>>) -> Result<Self> {
        let set = Self { template_id: template_id.into(), config, dim, x0, alphas };
        set.validate()?;
        Ok(set)
    }

    /// Gathers matching results that share a template, grid and solver settings.
    pub fn from_momenta(files: &[MomentaFile]) -> Result<Self> {
        let first = files.first().ok_or_else(|| Error::InvalidArgument("no momenta given".into()))?;
        for (i, f) in files.iter().enumerate().skip(1) {
            if f.template_id != first.template_id {
                return Err(Error::Schema(format!(
                    "momenta {i} match template '{}', expected '{}'",
                    f.template_id, first.template_id
                )));
            }
            if f.config != first.config || f.x0 != first.x0 || f.dim != first.dim {
                return Err(Error::Schema(format!("momenta {i} use a different grid or solver configuration")));
            }
        }
        Self::new(
            first.template_id.clone(),
            first.config,
            first.dim,
            first.x0.clone(),
            files.iter().map(|f| f.alpha.clone()).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::Schema(format!("config: {e}")))?;
        if self.alphas.is_empty() {
            return Err(Error::Schema("momentum set is empty".into()));
        }
        let n = self.x0.len();
        if n == 0 {
            return Err(Error::Schema("no particles".into()));
        }
        flatten(&self.x0, self.dim, "x0")?;
        if let Some(k) = self.alphas.iter().position(|a| a.len() != n) {
            return Err(Error::Schema(format!("alphas[{k}] has {} entries for {n} particles", self.alphas[k].len())));
        }
        if self.alphas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite momentum".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn particles(&self) -> usize {
        self.x0.len()
    }

    pub fn x0_flat(&self) -> Vec<f64> {
        self.x0.concat()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = read_json(path)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Average of the stored momenta.
    pub fn mean(&self) -> Vec<f64> {
        let k = self.len() as f64;
        let mut out = vec![0.0; self.particles()];
        for a in &self.alphas {
            for (o, v) in out.iter_mut().zip(a) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= k);
        out
    }

    /// `(1/K) Σ_k (alpha_k - mean)(alpha_k - mean)ᵀ`, row-major.
    pub fn empirical_covariance(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.particles();
        let mut cov = vec![0.0; n * n];
        for a in &self.alphas {
            let d: Vec<f64> = a.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..n {
                for j in 0..n {
                    cov[i * n + j] += d[i] * d[j];
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= self.len() as f64);
        cov
    }

    /// One draw of the random momentum for `seed`.
    pub fn sample(&self, c: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if !c.is_finite() {
            return Err(Error::InvalidArgument(format!("c must be finite, got {c}")));
        }
        let xi = standard_normals(seed, self.len());
        Ok(self.combine(c, n, &xi))
    }

    fn combine(&self, c: f64, n: usize, xi: &[f64]) -> Vec<f64> {
        let mean = self.mean();
        let scale = c / (n as f64).sqrt();
        let mut out = mean.clone();
        for (a, x) in self.alphas.iter().zip(xi) {
            for ((o, v), m) in out.iter_mut().zip(a).zip(&mean) {
                *o += scale * x * (v - m);
            }
        }
        out
    }

    /// Controls for a sampled momentum; `z0` is tied to the template gradient when
    /// `constrained`, zero otherwise.
    pub fn sample_controls(&self, c: f64, n: usize, seed: u64, template: &ScalarField, constrained: bool) -> Result<Controls> {
        let alpha = self.sample(c, n, seed)?;
        let z0 = if constrained {
            constrained_momenta(&alpha, &self.x0_flat(), template)
        } else {
            vec![0.0; alpha.len() * self.dim]
        };
        Controls::new(self.dim, alpha, z0)
    }

    /// Shoots a sampled momentum from the template and renders the deformed image at `t = 1`.
    pub fn shoot_sample(
        &self,
        c: f64,
        n: usize,
        seed: u64,
        template: &ScalarField,
        out: &RenderConfig,
        constrained: bool,
    ) -> Result<ScalarField> {
        if self.dim != 2 {
            return Err(Error::DimensionMismatch(format!("rendering needs 2-D particles, got {}", self.dim)));
        }
        let controls = self.sample_controls(c, n, seed, template, constrained)?;
        let x0 = self.x0_flat();
        let m0: Vec<f64> = x0.chunks(2).map(|p| template.eval(p)).collect();
        let traj = shoot(&x0, &m0, &controls, &self.config)?;
        Renderer::new(&traj, &controls.alpha, &self.config, out.substeps)?.deformed_frame(template, traj.timesteps(), out)
    }
}

/// `count` standard normals from a ChaCha8 stream via the Box–Muller transform.
pub fn standard_normals(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        out.push(r * (TAU * u2).cos());
        out.push(r * (TAU * u2).sin());
    }
    out.truncate(count);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(alphas: Vec<Vec<f64>>) -> MomentumSet {
        let n = alphas[0].len();
        let x0 = (0..n).map(|i| vec![i as f64, 0.0]).collect();
        MomentumSet::new("t", SolverConfig::default(), 2, x0, alphas).unwrap()
    }

    #[test]
    fn mean_examples() {
        let a = vec![0.5, -1.0, 2.0];
        assert_eq!(set(vec![a.clone()]).mean(), a);
        assert_eq!(set(vec![a.clone(), a.iter().map(|v| -v).collect()]).mean(), vec![0.0; 3]);
        assert_eq!(set(vec![a.clone(), a.clone(), a.clone()]).mean(), a);
    }

    #[test]
    fn zero_scale_gives_mean() {
        let s = set(vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![0.5, 0.25]]);
        assert_eq!(s.sample(0.0, 3, 9).unwrap(), s.mean());
    }

    #[test]
    fn draws_are_reproducible_and_affine_in_c() {
        let s = set(vec![vec![1.0, 2.0, 0.0], vec![3.0, -2.0, 1.0]]);
        assert_eq!(s.sample(1.0, 2, 5).unwrap(), s.sample(1.0, 2, 5).unwrap());
        assert_ne!(s.sample(1.0, 2, 5).unwrap(), s.sample(1.0, 2, 6).unwrap());
        let mean = s.mean();
        let one = s.sample(1.0, 2, 5).unwrap();
        let two = s.sample(2.5, 2, 5).unwrap();
        for ((a, b), m) in one.iter().zip(&two).zip(&mean) {
            assert!((2.5 * (a - m) - (b - m)).abs() < 1e-14);
        }
    }

    #[test]
    fn normals_have_unit_moments() {
        let xi = standard_normals(1, 200_000);
        let mean = xi.iter().sum::<f64>() / xi.len() as f64;
        let var = xi.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xi.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
        assert_eq!(standard_normals(1, 7), xi[..7].to_vec());
        assert_eq!(standard_normals(3, 0), Vec::<f64>::new());
    }

    #[test]
    fn rejects_bad_input() {
        let s = set(vec![vec![1.0]]);
        assert!(s.sample(1.0, 0, 0).is_err());
        assert!(s.sample(f64::NAN, 1, 0).is_err());
        let x0 = vec![vec![0.0, 0.0]];
        assert!(MomentumSet::new("t", SolverConfig::default(), 2, x0.clone(), vec![]).is_err());
        assert!(MomentumSet::new("t", SolverConfig::default(), 2, x0, vec![vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn collected_from_momenta_files() {
        let config = SolverConfig::default();
        let x0 = [0.0, 0.0, 1.0, 1.0];
        let m0 = [0.0, 0.0];
        let c1 = Controls::new(2, vec![1.0, 2.0], vec![0.0; 4]).unwrap();
        let c2 = Controls::new(2, vec![3.0, 4.0], vec![0.0; 4]).unwrap();
        let f1 = MomentaFile::new("q", config, &x0, &m0, &c1, false, None);
        let f2 = MomentaFile::new("q", config, &x0, &m0, &c2, false, None);
        let s = MomentumSet::from_momenta(&[f1.clone(), f2.clone()]).unwrap();
        assert_eq!(s.alphas, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(s.mean(), vec![2.0, 3.0]);

        let mut other = f2;
        other.template_id = "r".into();
        assert!(MomentumSet::from_momenta(&[f1, other]).is_err());
        assert!(MomentumSet::from_momenta(&[]).is_err());
    }

    #[test]
    fn shooting_the_zero_mean_returns_template() {
        let template = ScalarField::from_fn(8, 8, |i, j| ((i * j) as f64 / 49.0).sqrt()).unwrap();
        let (x0, _) = template.sample_grid(2).unwrap();
        let n = x0.len() / 2;
        let a: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let s = MomentumSet::new("t", SolverConfig::default(), 2, crate::persist::nest(&x0, 2), vec![a, neg]).unwrap();
        let out = RenderConfig::for_template(&template, 11);
        for constrained in [false, true] {
            let frame = s.shoot_sample(0.0, 2, 1, &template, &out, constrained).unwrap();
            assert_eq!(frame.values(), template.values());
        }
        let a = s.shoot_sample(1.0, 2, 4, &template, &out, false).unwrap();
        let b = s.shoot_sample(1.0, 2, 4, &template, &out, false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), template.values());
    }
}
