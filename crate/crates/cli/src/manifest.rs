use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hashes: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Collects paths while a command runs and writes `manifest.json`.
pub struct Recorder {
    command: &'static str,
    seed: Option<u64>,
    started: Instant,
    configs: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &'static str, seed: Option<u64>) -> Self {
        Self {
            command,
            seed,
            started: Instant::now(),
            configs: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, path: &Path) {
        self.configs.push(path.to_path_buf());
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect()
    }

    /// Writes the manifest to `path`.
    pub fn finish(self, path: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            seed: self.seed,
            config_hashes: Self::hashes(&self.configs)?,
            inputs: Self::hashes(&self.inputs)?,
            outputs: Self::hashes(&self.outputs)?,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        stmha::io::write_json(path, &manifest)?;
        Ok(())
    }
}
