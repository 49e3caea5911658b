//! JSON files for matched momenta.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Controls, SolverConfig};
use crate::error::{Error, Result};

/// Rows of `dim` coordinates from a flat row-major buffer.
pub fn nest(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect()
}

/// Flat row-major buffer from rows that must all have `dim` entries.
pub fn flatten(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<Vec<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
        return Err(Error::Schema(format!("{what}[{bad}] has {} entries, expected {dim}", rows[bad].len())));
    }
    Ok(rows.concat())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NotFound(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Result of one matching run: everything needed to shoot it again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentaFile {
    pub template_id: String,
    pub config: SolverConfig,
    pub dim: usize,
    pub x0: Vec<Vec<f64>>,
    pub m0: Vec<f64>,
    pub alpha: Vec<f64>,
    pub z0: Vec<Vec<f64>>,
    pub constrained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
}

impl MomentaFile {
    pub fn new(
        template_id: impl Into<String>,
        config: SolverConfig,
        x0: &[f64],
        m0: &[f64],
        controls: &Controls,
        constrained: bool,
        energy: Option<f64>,
    ) -> Self {
        let d = controls.dim;
        Self {
            template_id: template_id.into(),
            config,
            dim: d,
            x0: nest(x0, d),
            m0: m0.to_vec(),
            alpha: controls.alpha.clone(),
            z0: nest(&controls.z0, d),
            constrained,
            energy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::Schema(format!("config: {e}")))?;
        if !(1..=3).contains(&self.dim) {
            return Err(Error::Schema(format!("dim must be 1, 2 or 3, got {}", self.dim)));
        }
        let n = self.alpha.len();
        if n == 0 {
            return Err(Error::Schema("no particles".into()));
        }
        if self.x0.len() != n || self.z0.len() != n || self.m0.len() != n {
            return Err(Error::Schema(format!(
                "{n} scalar momenta but {} positions, {} intensities, {} vector momenta",
                self.x0.len(),
                self.m0.len(),
                self.z0.len()
            )));
        }
        self.x0_flat()?;
        self.controls()?;
        Ok(())
    }

    pub fn x0_flat(&self) -> Result<Vec<f64>> {
        flatten(&self.x0, self.dim, "x0")
    }

    pub fn controls(&self) -> Result<Controls> {
        Controls::new(self.dim, self.alpha.clone(), flatten(&self.z0, self.dim, "z0")?)
            .map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = read_json(path)?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
