use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metamorph::{ImageFormat, OptimOptions, SolverConfig};
use serde::{Deserialize, Serialize};

/// Image metamorphosis by geodesic shooting of kernel particles.
#[derive(Debug, Parser)]
#[command(name = "metamorph", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Every command's resolved arguments are echoed to `run_config.json` in its output
/// directory; `replay` runs them again.
#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Match a template image to a target image.
    Match(MatchArgs),
    /// Integrate stored momenta and write the trajectory.
    Shoot(ShootArgs),
    /// Render the deformation of the template along stored momenta.
    Render(RenderArgs),
    /// Shoot random momenta drawn around a momentum set.
    Sample(SampleArgs),
    /// Gather several momenta files for one template into a momentum set.
    Collect(CollectArgs),
    /// Run a command again from its echoed run_config.json.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SolverArgs {
    /// Width of the deformation kernel.
    #[arg(long, default_value_t = 1.5)]
    pub tau_v: f64,
    /// Width of the intensity kernel.
    #[arg(long, default_value_t = 0.5)]
    pub tau_h: f64,
    /// Weight of the intensity term; results depend on it noticeably.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 10)]
    pub timesteps: usize,
}

impl SolverArgs {
    pub fn config(&self) -> metamorph::Result<SolverConfig> {
        SolverConfig::new(self.sigma, self.timesteps, self.tau_v, self.tau_h)
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct MatchArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Pixel stride of the particle grid.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Resize both images to this many pixels per side (followed by a light smoothing).
    #[arg(long)]
    pub upsample: Option<usize>,
    /// Tie the vector momenta to the template gradient and optimize the scalar ones only.
    #[arg(long)]
    pub constrained: bool,
    /// Precondition gradients by the inverse Gram matrices of the particle grid.
    #[arg(long)]
    pub precondition: bool,
    /// Ridge added to the Gram matrices when preconditioning (default 1e-6 per particle).
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub grad_tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub energy_tol: f64,
}

impl MatchArgs {
    pub fn options(&self) -> OptimOptions {
        OptimOptions {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            energy_tol: self.energy_tol,
            constrained: self.constrained,
            preconditioned: self.precondition,
            ridge: self.ridge,
            ..OptimOptions::default()
        }
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ShootArgs {
    /// Momenta file written by `match`.
    #[arg(long)]
    pub momenta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also report the matching energy against this image.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Resize the target as was done for matching.
    #[arg(long)]
    pub upsample: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Pgm,
    Png,
}

impl From<FormatArg> for ImageFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Pgm => ImageFormat::Pgm,
            FormatArg::Png => ImageFormat::Png,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct OutputArgs {
    /// Output width in pixels (default: template width).
    #[arg(long)]
    pub width: Option<usize>,
    /// Output height in pixels (default: template height).
    #[arg(long)]
    pub height: Option<usize>,
    /// Flow sub-steps per stored time step.
    #[arg(long, default_value_t = 4)]
    pub substeps: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Pgm)]
    pub format: FormatArg,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct RenderArgs {
    /// Momenta file written by `match`.
    #[arg(long)]
    pub momenta: PathBuf,
    /// Template image the momenta were matched from.
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resize the template as was done for matching.
    #[arg(long)]
    pub upsample: Option<usize>,
    #[arg(long, default_value_t = 11)]
    pub frames: usize,
    /// Pixels between warped grid lines; 0 writes no grid overlays.
    #[arg(long, default_value_t = 0)]
    pub gridlines: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    /// Momentum set written by `collect`.
    #[arg(long)]
    pub momenta: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub upsample: Option<usize>,
    /// Spread of the random momenta around their mean.
    #[arg(long)]
    pub c: f64,
    /// Normalization count (default: number of stored momenta).
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed of the first sample; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Derive the vector momenta from the template gradient instead of setting them to zero.
    #[arg(long)]
    pub constrained: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct CollectArgs {
    /// Momentum set file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Momenta files written by `match`, all from the same template.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct ReplayArgs {
    /// A run_config.json written by an earlier command.
    pub config: PathBuf,
}
