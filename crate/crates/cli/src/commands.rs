use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use metamorph::adjoint::energy;
use metamorph::dynamics::hamiltonian;
use metamorph::optimizer::{run_with_observer, IterRecord};
use metamorph::persist::{read_json, write_json};
use metamorph::{shoot, MomentaFile, MomentumSet, RenderConfig, Renderer, ScalarField, Status};
use serde_json::json;

use crate::args::{CollectArgs, Command, MatchArgs, OutputArgs, RenderArgs, SampleArgs, ShootArgs};

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Match(a) => cmd_match(&a),
        Command::Shoot(a) => cmd_shoot(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Collect(a) => cmd_collect(&a),
        Command::Replay(a) => {
            let echoed: Command = read_json(&a.config)?;
            run(echoed)
        }
    }
}

fn prepare_out(dir: &Path, command: &Command) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("run_config.json"), command)?;
    Ok(())
}

fn load_image(path: &Path, upsample: Option<usize>) -> Result<ScalarField> {
    let image = ScalarField::load(path, true)?;
    Ok(match upsample {
        Some(size) => image.upsample(size, size)?,
        None => image,
    })
}

fn template_id(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cmd_match(a: &MatchArgs) -> Result<ExitCode> {
    let config = a.solver.config()?;
    let opts = a.options();
    opts.validate()?;
    let template = load_image(&a.template, a.upsample)?;
    let target = load_image(&a.target, a.upsample)?;
    if (template.width(), template.height()) != (target.width(), target.height()) {
        bail!(
            "template is {}x{} but target is {}x{}",
            template.width(),
            template.height(),
            target.width(),
            target.height()
        );
    }
    prepare_out(&a.out, &Command::Match(a.clone()))?;
    let (x0, m0) = template.sample_grid(a.stride)?;
    eprintln!("matching with {} particles", m0.len());

    let mut log = BufWriter::new(File::create(a.out.join("iterations.jsonl"))?);
    let mut log_error = None;
    let result = run_with_observer(&template, &target, &x0, &m0, &config, &opts, |r: &IterRecord| {
        let line = serde_json::to_string(r).map_err(std::io::Error::from);
        if let Err(e) = line.and_then(|l| writeln!(log, "{l}")).and_then(|_| log.flush()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e).context("writing iterations.jsonl");
    }

    let momenta = MomentaFile::new(
        template_id(&a.template),
        config,
        &x0,
        &m0,
        &result.controls,
        a.constrained,
        Some(result.energy()),
    );
    momenta.save(&a.out.join("momenta.json"))?;

    let report = &result.report;
    let n = report.bc_residual.len() as f64;
    let initial = result.energy_history[0];
    let diagnostics = json!({
        "status": result.status,
        "iterations": result.iterations,
        "particles": m0.len(),
        "initial_energy": initial,
        "energy": result.energy(),
        "relative_energy": if initial > 0.0 { result.energy() / initial } else { 0.0 },
        "gradient": report.summary(),
        "bc_residual": {
            "max": report.bc_residual.iter().copied().fold(0.0, f64::max),
            "mean": report.bc_residual.iter().sum::<f64>() / n,
            "normalized": report.bc_normalized,
        },
    });
    write_json(&a.out.join("diagnostics.json"), &diagnostics)?;
    eprintln!(
        "{} after {} iterations: energy {:.6e} (initial {:.6e})",
        result.status.as_str(),
        result.iterations,
        result.energy(),
        initial
    );
    Ok(match result.status {
        Status::LineSearchFailed => {
            eprintln!("line search failed; momenta hold the best controls found");
            ExitCode::from(2)
        }
        Status::MaxIters => {
            eprintln!("warning: stopped at the iteration limit before converging");
            ExitCode::SUCCESS
        }
        _ => ExitCode::SUCCESS,
    })
}

fn cmd_shoot(a: &ShootArgs) -> Result<ExitCode> {
    let momenta = MomentaFile::load(&a.momenta)?;
    let controls = momenta.controls()?;
    let x0 = momenta.x0_flat()?;
    let traj = shoot(&x0, &momenta.m0, &controls, &momenta.config)?;
    prepare_out(&a.out, &Command::Shoot(a.clone()))?;

    let mut csv = BufWriter::new(File::create(a.out.join("trajectory.csv"))?);
    traj.write_csv(&mut csv)?;
    csv.flush()?;

    let h0 = hamiltonian(traj.initial(), &controls.alpha, &momenta.config)?;
    let h1 = hamiltonian(traj.last(), &controls.alpha, &momenta.config)?;
    let mut summary = json!({ "hamiltonian_start": h0, "hamiltonian_end": h1 });
    if let Some(path) = &a.target {
        let target = load_image(path, a.upsample)?;
        let e = energy(&traj, &target)?;
        summary["energy"] = json!(e);
        eprintln!("energy {e:.6e}");
    }
    write_json(&a.out.join("shoot.json"), &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn render_config(output: &OutputArgs, template: &ScalarField, frames: usize, gridlines: usize) -> RenderConfig {
    RenderConfig {
        out_width: output.width.unwrap_or(template.width()),
        out_height: output.height.unwrap_or(template.height()),
        frames,
        gridline_stride: gridlines,
        substeps: output.substeps,
        format: output.format.into(),
    }
}

fn cmd_render(a: &RenderArgs) -> Result<ExitCode> {
    let momenta = MomentaFile::load(&a.momenta)?;
    if momenta.dim != 2 {
        bail!("rendering needs 2-D momenta, got dimension {}", momenta.dim);
    }
    let template = load_image(&a.template, a.upsample)?;
    let controls = momenta.controls()?;
    let x0 = momenta.x0_flat()?;
    let traj = shoot(&x0, &momenta.m0, &controls, &momenta.config)?;
    let out = render_config(&a.output, &template, a.frames, a.gridlines);
    out.validate(traj.timesteps())?;
    prepare_out(&a.out, &Command::Render(a.clone()))?;
    let written = Renderer::new(&traj, &controls.alpha, &momenta.config, out.substeps)?
        .export_sequence(&template, &out, &a.out)?;
    eprintln!("wrote {} files to {}", written.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sample(a: &SampleArgs) -> Result<ExitCode> {
    let set = MomentumSet::load(&a.momenta)?;
    let template = load_image(&a.template, a.upsample)?;
    let n = a.n.unwrap_or(set.len());
    let out = render_config(&a.output, &template, 1, 0);
    out.validate(set.config.timesteps)?;
    prepare_out(&a.out, &Command::Sample(a.clone()))?;
    let ext = out.format.extension();
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let frame = set.shoot_sample(a.c, n, seed, &template, &out, a.constrained)?;
        frame.save(a.out.join(format!("sample_{i:04}.{ext}")))?;
    }
    eprintln!("wrote {} samples to {}", a.count, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_collect(a: &CollectArgs) -> Result<ExitCode> {
    let files = a
        .inputs
        .iter()
        .map(|p| MomentaFile::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let set = MomentumSet::from_momenta(&files)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    set.save(&a.out)?;
    eprintln!("collected {} momenta into {}", set.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
