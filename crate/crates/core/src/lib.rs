//! Image metamorphosis by geodesic shooting of a kernel particle system.
//!
//! Pixels of a template image are sampled as particles carrying a position, an intensity
//! and two momenta. Integrating the particle Hamiltonian system deforms the template and
//! changes its intensity at the same time; the initial momenta are optimized so that the
//! endpoint matches a target image.

pub mod adjoint;
pub mod dynamics;
pub mod error;
pub mod image_field;
pub mod kernels;
pub mod optimizer;
pub mod persist;
pub mod renderer;
pub mod sampler;

pub use adjoint::{gradient, GradientReport};
pub use dynamics::{shoot, Controls, ParticleState, SolverConfig, Trajectory};
pub use error::{Error, Result};
pub use image_field::{ImageFormat, Intensity, ScalarField};
pub use kernels::{KernelFamily, KernelParams};
pub use optimizer::{OptimOptions, OptimResult, Status};
pub use persist::MomentaFile;
pub use renderer::{RenderConfig, Renderer};
pub use sampler::MomentumSet;
