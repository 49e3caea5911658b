//! Images along a shot trajectory.
//!
//! Query points are advected by the kernel velocity field with RK4, jointly with the
//! particle system: every stored interval is split into `substeps` steps, the particles are
//! re-integrated over those steps starting from the stored state, and the query point uses
//! the particle stage states of each sub-step. Intensity `∫ ζ ds` is accumulated with the
//! same quadrature, so a query point sitting on a particle reproduces its `m`.
//!
//! The deformed image `q(t) = m(t) ∘ φ(t)⁻¹` is evaluated per pixel by integrating the
//! characteristic backwards from `t` to `0`.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_at_point, rk4_step_with_stages, velocity_at_point, ParticleState, SolverConfig, Trajectory};
use crate::error::{Error, Result};
use crate::image_field::{ImageFormat, Intensity, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub out_width: usize,
    pub out_height: usize,
    pub frames: usize,
    /// Pixels between grid lines; 0 disables grid overlays.
    pub gridline_stride: usize,
    pub substeps: usize,
    pub format: ImageFormat,
}

impl RenderConfig {
    /// Output matching the template resolution, `frames` frames, no grid, 4 sub-steps, PGM.
    pub fn for_template(template: &ScalarField, frames: usize) -> Self {
        Self {
            out_width: template.width(),
            out_height: template.height(),
            frames,
            gridline_stride: 0,
            substeps: 4,
            format: ImageFormat::Pgm,
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.out_width == 0 || self.out_height == 0 {
            return Err(Error::InvalidArgument("output size must be positive".into()));
        }
        if self.frames == 0 || self.frames > timesteps + 1 {
            return Err(Error::InvalidArgument(format!(
                "frames must lie in 1..={}, got {}",
                timesteps + 1,
                self.frames
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        Ok(())
    }

    /// Stored time indices of the exported frames, evenly spaced and including both ends.
    pub fn frame_indices(&self, timesteps: usize) -> Vec<usize> {
        if self.frames == 1 {
            return vec![timesteps];
        }
        (0..self.frames)
            .map(|i| ((i * timesteps) as f64 / (self.frames - 1) as f64).round() as usize)
            .collect()
    }
}

type StageTable = Vec<Vec<[ParticleState; 4]>>;

/// Flow of a trajectory, with particle sub-step stages computed on first use.
pub struct Renderer<'a> {
    traj: &'a Trajectory,
    alpha: &'a [f64],
    config: &'a SolverConfig,
    substeps: usize,
    forward: OnceLock<StageTable>,
    backward: OnceLock<StageTable>,
}

/// Position of a query point and its accumulated intensity.
#[derive(Clone, Copy, Debug)]
struct Carried {
    y: [f64; 3],
    acc: f64,
}

impl<'a> Renderer<'a> {
    pub fn new(traj: &'a Trajectory, alpha: &'a [f64], config: &'a SolverConfig, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        if alpha.len() != traj.initial().len() {
            return Err(Error::DimensionMismatch(format!(
                "{} intensity momenta for {} particles",
                alpha.len(),
                traj.initial().len()
            )));
        }
        Ok(Self { traj, alpha, config, substeps, forward: OnceLock::new(), backward: OnceLock::new() })
    }

    pub fn trajectory(&self) -> &Trajectory {
        self.traj
    }

    fn dim(&self) -> usize {
        self.traj.initial().dim
    }

    fn check(&self, t_index: usize, points: &[f64]) -> Result<()> {
        if t_index > self.traj.timesteps() {
            return Err(Error::InvalidArgument(format!(
                "time index {t_index} beyond {} stored steps",
                self.traj.timesteps()
            )));
        }
        if points.len() % self.dim() != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates are not a multiple of dimension {}",
                points.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn table(&self, backward: bool) -> &StageTable {
        let cell = if backward { &self.backward } else { &self.forward };
        cell.get_or_init(|| {
            let h = self.traj.dt / self.substeps as f64 * if backward { -1.0 } else { 1.0 };
            (0..self.traj.timesteps())
                .map(|n| {
                    let mut state = self.traj.states[if backward { n + 1 } else { n }].clone();
                    (0..self.substeps)
                        .map(|_| {
                            let step = rk4_step_with_stages(&state, self.alpha, self.config, h);
                            state = step.next;
                            step.stages
                        })
                        .collect()
                })
                .collect()
        })
    }

    fn eval(&self, state: &ParticleState, y: &[f64], v: &mut [f64], with_rate: bool) -> f64 {
        if with_rate {
            flow_at_point(state, self.alpha, self.config, y, v)
        } else {
            velocity_at_point(state, &self.config.kernel_v, y, v);
            0.0
        }
    }

    fn point_step(&self, stages: &[ParticleState; 4], h: f64, c: &mut Carried, with_rate: bool) {
        let d = self.dim();
        let mut v = [[0.0; 3]; 4];
        let mut r = [0.0; 4];
        let mut probe = c.y;
        let offsets = [0.5 * h, 0.5 * h, h];
        for s in 0..4 {
            if s > 0 {
                for i in 0..d {
                    probe[i] = c.y[i] + offsets[s - 1] * v[s - 1][i];
                }
            }
            r[s] = self.eval(&stages[s], &probe[..d], &mut v[s][..d], with_rate);
        }
        let w = h / 6.0;
        for i in 0..d {
            c.y[i] += w * (v[0][i] + 2.0 * v[1][i] + 2.0 * v[2][i] + v[3][i]);
        }
        c.acc += w * (r[0] + 2.0 * r[1] + 2.0 * r[2] + r[3]);
    }

    fn carry_interval(&self, n: usize, backward: bool, c: &mut Carried, with_rate: bool) -> Result<()> {
        let h = self.traj.dt / self.substeps as f64 * if backward { -1.0 } else { 1.0 };
        for stages in &self.table(backward)[n] {
            self.point_step(stages, h, c, with_rate);
        }
        if c.y.iter().chain([&c.acc]).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence { step: n })
        }
    }

    fn start(&self, y: &[f64]) -> Carried {
        let mut c = Carried { y: [0.0; 3], acc: 0.0 };
        c.y[..y.len()].copy_from_slice(y);
        c
    }

    /// Forward images of `points` and `∫₀ᵗ ζ` along them, at every stored index `0..=t_index`.
    fn forward_history(&self, y: &[f64], t_index: usize, with_rate: bool) -> Result<Vec<Carried>> {
        let mut c = self.start(y);
        let mut out = Vec::with_capacity(t_index + 1);
        out.push(c);
        for n in 0..t_index {
            self.carry_interval(n, false, &mut c, with_rate)?;
            out.push(c);
        }
        Ok(out)
    }

    fn backward_to_origin(&self, y: &[f64], t_index: usize) -> Result<Carried> {
        let mut c = self.start(y);
        for n in (0..t_index).rev() {
            self.carry_interval(n, true, &mut c, true)?;
        }
        Ok(c)
    }

    /// `φ(t)(y)` for each point.
    pub fn advect_forward(&self, points: &[f64], t_index: usize) -> Result<Vec<f64>> {
        self.check(t_index, points)?;
        let d = self.dim();
        let rows: Vec<Vec<f64>> = points
            .par_chunks(d)
            .map(|y| Ok(self.forward_history(y, t_index, false)?.last().unwrap().y[..d].to_vec()))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    /// `φ(t)⁻¹(y)` for each point.
    pub fn advect_backward(&self, points: &[f64], t_index: usize) -> Result<Vec<f64>> {
        self.check(t_index, points)?;
        let d = self.dim();
        let rows: Vec<Vec<f64>> = points
            .par_chunks(d)
            .map(|y| Ok(self.backward_to_origin(y, t_index)?.y[..d].to_vec()))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    /// Evolving template `m(t, y₀) = q0(y₀) + ∫₀ᵗ ζ(s, φ(s)(y₀)) ds` at material points `y₀`.
    pub fn template_values(&self, template: &(impl Intensity + ?Sized), points: &[f64], t_index: usize) -> Result<Vec<f64>> {
        self.check(t_index, points)?;
        points
            .par_chunks(self.dim())
            .map(|y| Ok(template.value(y) + self.forward_history(y, t_index, true)?.last().unwrap().acc))
            .collect()
    }

    /// Deformed template `q(t) = m(t) ∘ φ(t)⁻¹` at spatial points.
    pub fn deformed_values(&self, template: &(impl Intensity + ?Sized), points: &[f64], t_index: usize) -> Result<Vec<f64>> {
        self.check(t_index, points)?;
        let d = self.dim();
        points
            .par_chunks(d)
            .map(|y| {
                let c = self.backward_to_origin(y, t_index)?;
                // the backward pass accumulates ∫ₜ⁰ ζ = -∫₀ᵗ ζ
                Ok(template.value(&c.y[..d]) - c.acc)
            })
            .collect()
    }

    /// Deformed template sampled on an output grid spanning the template's extent.
    pub fn deformed_frame(&self, template: &ScalarField, t_index: usize, out: &RenderConfig) -> Result<ScalarField> {
        let grid = template.same_extent(out.out_width, out.out_height)?;
        let values = self.deformed_values(template, &grid.node_positions(), t_index)?;
        grid.with_values(values)
    }

    /// Grid lines of the output grid carried forward to `t`, drawn dark on white.
    pub fn gridlines_frame(&self, template: &ScalarField, t_index: usize, out: &RenderConfig) -> Result<ScalarField> {
        Ok(self.gridlines_frames(template, &[t_index], out)?.pop().unwrap())
    }

    fn gridlines_frames(&self, template: &ScalarField, t_indices: &[usize], out: &RenderConfig) -> Result<Vec<ScalarField>> {
        let grid = template.same_extent(out.out_width, out.out_height)?;
        let (w, h) = (out.out_width, out.out_height);
        let white = || grid.with_values(vec![1.0; w * h]);
        if out.gridline_stride == 0 || self.dim() != 2 {
            return t_indices.iter().map(|_| white()).collect();
        }
        let s = out.gridline_stride;
        let mut lines: Vec<Vec<[f64; 2]>> = Vec::new();
        for j in (0..h).step_by(s) {
            lines.push((0..w).map(|i| grid.node_position(i, j)).collect());
        }
        for i in (0..w).step_by(s) {
            lines.push((0..h).map(|j| grid.node_position(i, j)).collect());
        }
        let last = t_indices.iter().copied().max().unwrap_or(0);
        self.check(last, &[])?;
        let histories: Vec<Vec<Vec<Carried>>> = lines
            .iter()
            .map(|line| line.par_iter().map(|p| self.forward_history(p, last, false)).collect::<Result<_>>())
            .collect::<Result<_>>()?;

        let (spacing, origin) = (grid.spacing(), grid.origin());
        let to_pixel = |y: &[f64; 3]| {
            [((y[0] - origin[0]) / spacing[0]).round(), ((y[1] - origin[1]) / spacing[1]).round()]
        };
        t_indices
            .iter()
            .map(|&t| {
                let mut values = vec![1.0; w * h];
                for line in &histories {
                    for pair in line.windows(2) {
                        let a = to_pixel(&pair[0][t].y);
                        let b = to_pixel(&pair[1][t].y);
                        draw_segment(&mut values, w, h, a, b);
                    }
                }
                grid.with_values(values)
            })
            .collect()
    }

    /// Writes `frame_XXXX`, grid overlays `grid_XXXX` when enabled, and `trajectory.csv`.
    pub fn export_sequence(&self, template: &ScalarField, out: &RenderConfig, dir: &Path) -> Result<Vec<PathBuf>> {
        let steps = self.traj.timesteps();
        out.validate(steps)?;
        std::fs::create_dir_all(dir)?;
        let indices = out.frame_indices(steps);
        let ext = out.format.extension();
        let mut written = Vec::new();
        let mut frames = Vec::with_capacity(indices.len());
        for (i, &t) in indices.iter().enumerate() {
            let frame = self.deformed_frame(template, t, out)?;
            let path = dir.join(format!("frame_{i:04}.{ext}"));
            frame.save(&path)?;
            written.push(path);
            frames.push(frame);
        }
        if out.gridline_stride > 0 {
            let grids = self.gridlines_frames(template, &indices, out)?;
            for (i, (frame, grid)) in frames.iter().zip(&grids).enumerate() {
                let path = dir.join(format!("grid_{i:04}.{ext}"));
                frame.multiply(grid)?.save(&path)?;
                written.push(path);
            }
        }
        let csv = dir.join("trajectory.csv");
        let mut file = std::io::BufWriter::new(std::fs::File::create(&csv)?);
        self.traj.write_csv(&mut file)?;
        std::io::Write::flush(&mut file)?;
        written.push(csv);
        Ok(written)
    }
}

/// Bresenham segment between pixel coordinates, clipped to the image.
fn draw_segment(values: &mut [f64], w: usize, h: usize, a: [f64; 2], b: [f64; 2]) {
    if !(a.iter().chain(&b).all(|v| v.is_finite())) {
        return;
    }
    let limit = 4 * (w + h) as i64;
    let clamp = |v: f64| (v as i64).clamp(-limit, limit);
    let (mut x0, mut y0, x1, y1) = (clamp(a[0]), clamp(a[1]), clamp(b[0]), clamp(b[1]));
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as usize) < w && (y0 as usize) < h {
            values[y0 as usize * w + x0 as usize] = 0.0;
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// `m(t)` at material points.
pub fn template_frame(
    traj: &Trajectory,
    template: &(impl Intensity + ?Sized),
    alpha: &[f64],
    config: &SolverConfig,
    t_index: usize,
    points: &[f64],
    substeps: usize,
) -> Result<Vec<f64>> {
    Renderer::new(traj, alpha, config, substeps)?.template_values(template, points, t_index)
}

/// `q(t)` on the output grid.
pub fn deformed_frame(
    traj: &Trajectory,
    template: &ScalarField,
    alpha: &[f64],
    config: &SolverConfig,
    t_index: usize,
    out: &RenderConfig,
) -> Result<ScalarField> {
    Renderer::new(traj, alpha, config, out.substeps)?.deformed_frame(template, t_index, out)
}

/// Warped grid lines at `t`; all white when `out.gridline_stride` is 0.
pub fn gridlines_frame(
    traj: &Trajectory,
    template: &ScalarField,
    alpha: &[f64],
    config: &SolverConfig,
    t_index: usize,
    out: &RenderConfig,
) -> Result<ScalarField> {
    Renderer::new(traj, alpha, config, out.substeps)?.gridlines_frame(template, t_index, out)
}

/// Frame sequence plus trajectory CSV; returns the written paths.
pub fn export_sequence(
    traj: &Trajectory,
    template: &ScalarField,
    alpha: &[f64],
    config: &SolverConfig,
    out: &RenderConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    Renderer::new(traj, alpha, config, out.substeps)?.export_sequence(template, out, dir)
}
