//! JSON run manifest written next to every output file.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::run::CheckOutcome;

#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub backend: String,
    pub paths: usize,
    pub steps: usize,
    pub batches: usize,
    pub degree: usize,
    pub implicit: bool,
}

impl Settings {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            backend: c.solver.backend.clone(),
            paths: c.mc.paths,
            steps: c.mc.steps,
            batches: c.mc.batches,
            degree: c.solver.degree,
            implicit: c.solver.implicit,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub workers: usize,
    pub settings: Settings,
    /// Effective configuration after command-line overrides; running
    /// `solve` on it reproduces the outputs.
    pub config: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub checks: Vec<CheckOutcome>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, workers: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: cfg.mc.seed,
            workers,
            settings: Settings::from_config(cfg),
            config: cfg.to_toml(),
            wall_time_s: 0.0,
            outputs: Vec::new(),
            checks: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}
