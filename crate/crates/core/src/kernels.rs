//! Radial reproducing kernels for the deformation (`V`) and intensity (`H`) spaces.
//!
//! Both kernels are Matérn-type profiles `f(u) = P(u) e^{-u}` with `u = |x - y| / tau`:
//!
//! | family | profile `P(u)`                               |
//! |--------|----------------------------------------------|
//! | `V`    | `1 + u + 3u²/7 + 2u³/21 + u⁴/105`            |
//! | `H`    | `1 + u + u²/3`                               |
//!
//! The `V` kernel is matrix valued, `K_V(x, y) = f_V(u) Id`, and is only ever stored and
//! applied as the scalar `f_V`.
//!
//! Derivatives are expressed through two radial factors so that
//!
//! ```text
//! ∇₁K(x, y)  = d1 · (x - y)
//! D²₁₁K(x, y) = d1 · Id + d2 · (x - y)(x - y)ᵀ
//! ```
//!
//! with `d1 = f'(u) / (u tau²)` and `d2 = (f'(u)/u)' / (u tau⁴)`. For these profiles both
//! factors reduce to a polynomial times `e^{-u}`, so they are smooth through `x = y`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    /// Order-4 profile, used for velocity fields.
    V,
    /// Order-2 profile, used for intensity rates.
    H,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub tau: f64,
    pub family: KernelFamily,
}

/// Value and radial derivative factors of a kernel at a given separation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Radial {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Full evaluation of a kernel and its derivatives at one pair of points.
///
/// `grad2` and `hess12` are never stored: for translation-invariant kernels they are
/// `-grad1` and `-hess11`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    pub grad1: Vec<f64>,
    pub hess11: DMatrix<f64>,
}

impl KernelEval {
    pub fn hess12(&self) -> DMatrix<f64> {
        -&self.hess11
    }
}

impl KernelParams {
    pub fn new(family: KernelFamily, tau: f64) -> Result<Self> {
        let params = Self { tau, family };
        params.validate()?;
        Ok(params)
    }

    pub fn v(tau: f64) -> Result<Self> {
        Self::new(KernelFamily::V, tau)
    }

    pub fn h(tau: f64) -> Result<Self> {
        Self::new(KernelFamily::H, tau)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel width must be positive and finite, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub fn value_r2(&self, r2: f64) -> f64 {
        let u = r2.sqrt() / self.tau;
        let e = (-u).exp();
        match self.family {
            KernelFamily::V => e * (1.0 + u * (1.0 + u * (3.0 / 7.0 + u * (2.0 / 21.0 + u / 105.0)))),
            KernelFamily::H => e * (1.0 + u * (1.0 + u / 3.0)),
        }
    }

    /// Value and first radial factor `d1`, enough for the forward dynamics.
    #[inline]
    pub fn value_d1_r2(&self, r2: f64) -> (f64, f64) {
        let u = r2.sqrt() / self.tau;
        let e = (-u).exp();
        let t2 = self.tau * self.tau;
        match self.family {
            KernelFamily::V => (
                e * (1.0 + u * (1.0 + u * (3.0 / 7.0 + u * (2.0 / 21.0 + u / 105.0)))),
                -e * (15.0 + u * (15.0 + u * (6.0 + u))) / (105.0 * t2),
            ),
            KernelFamily::H => (e * (1.0 + u * (1.0 + u / 3.0)), -e * (1.0 + u) / (3.0 * t2)),
        }
    }

    /// Value and both radial factors.
    #[inline]
    pub fn radial_r2(&self, r2: f64) -> Radial {
        let u = r2.sqrt() / self.tau;
        let e = (-u).exp();
        let t2 = self.tau * self.tau;
        match self.family {
            KernelFamily::V => Radial {
                value: e * (1.0 + u * (1.0 + u * (3.0 / 7.0 + u * (2.0 / 21.0 + u / 105.0)))),
                d1: -e * (15.0 + u * (15.0 + u * (6.0 + u))) / (105.0 * t2),
                d2: e * (3.0 + u * (3.0 + u)) / (105.0 * t2 * t2),
            },
            KernelFamily::H => Radial {
                value: e * (1.0 + u * (1.0 + u / 3.0)),
                d1: -e * (1.0 + u) / (3.0 * t2),
                d2: e / (3.0 * t2 * t2),
            },
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let r2 = checked_dist2(x, y)?;
        Ok(self.value_r2(r2))
    }

    pub fn grad1(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let r2 = checked_dist2(x, y)?;
        let (_, d1) = self.value_d1_r2(r2);
        Ok(x.iter().zip(y).map(|(a, b)| d1 * (a - b)).collect())
    }

    pub fn hess11(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let r2 = checked_dist2(x, y)?;
        Ok(hessian_from_radial(&self.radial_r2(r2), x, y))
    }

    pub fn hess12(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        Ok(-self.hess11(x, y)?)
    }

    pub fn evaluate(&self, x: &[f64], y: &[f64]) -> Result<KernelEval> {
        let r2 = checked_dist2(x, y)?;
        let radial = self.radial_r2(r2);
        Ok(KernelEval {
            value: radial.value,
            grad1: x.iter().zip(y).map(|(a, b)| radial.d1 * (a - b)).collect(),
            hess11: hessian_from_radial(&radial, x, y),
        })
    }
}

fn hessian_from_radial(radial: &Radial, x: &[f64], y: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    DMatrix::from_fn(d, d, |i, j| {
        let diag = if i == j { radial.d1 } else { 0.0 };
        diag + radial.d2 * (x[i] - y[i]) * (x[j] - y[j])
    })
}

fn checked_dist2(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "points of dimension {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite kernel argument".into()));
    }
    Ok(dist2(x, y))
}

#[inline]
pub(crate) fn dist2(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Gram matrix `K(x_k, x_l)` of a flat row-major point list with `dim` coordinates each.
pub fn gram_matrix(params: &KernelParams, points: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    params.validate()?;
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "gram matrix needs at least one point; got {} coordinates for dimension {dim}",
            points.len()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite point coordinate".into()));
    }
    let n = points.len() / dim;
    let mut gram = DMatrix::zeros(n, n);
    for k in 0..n {
        gram[(k, k)] = 1.0;
        let xk = &points[k * dim..(k + 1) * dim];
        for l in (k + 1)..n {
            let v = params.value_r2(dist2(xk, &points[l * dim..(l + 1) * dim]));
            gram[(k, l)] = v;
            gram[(l, k)] = v;
        }
    }
    Ok(gram)
}
