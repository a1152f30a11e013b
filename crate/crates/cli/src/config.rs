use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mpe_core::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};

/// Run configuration file.
///
/// ```toml
/// data_dir = "data"
/// out_dir = "runs/a"
///
/// [train]
/// phase = "search"
/// lambda = 1e-4
/// ```
///
/// Relative paths resolve against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output of `mpe ingest`.
    pub data_dir: PathBuf,
    /// Phase outputs go to `out_dir/<phase>/`.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn with_phase(mut self, phase: Option<Phase>) -> Self {
        if let Some(p) = phase {
            self.train.phase = p;
        }
        self
    }

    pub fn phase_dir(&self) -> PathBuf {
        self.out_dir.join(self.train.phase.as_str())
    }

    /// Writes the fully resolved config as `config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let mut resolved = self.clone();
        resolved.data_dir = absolute(&self.data_dir);
        resolved.out_dir = absolute(&self.out_dir);
        fs::write(dir.join("config.toml"), toml::to_string(&resolved)?)?;
        Ok(())
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
