use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Inputs;
use crate::{CliError, RunArgs};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config: String,
    inputs_sha256: String,
    inputs: Vec<FileDigest>,
    seed: Option<u64>,
    seed_source: &'a str,
    threads: usize,
    artifacts: Vec<FileDigest>,
    wall_time_secs: f64,
}

/// Artifacts written by one run, finished off with `manifest.json`.
pub struct Outcome {
    pub dir: PathBuf,
    pub inputs: Inputs,
    pub seed: Option<u64>,
    pub written: Vec<(String, String)>,
    /// Set when the run completed but its checks did not pass.
    pub failure: Option<CliError>,
}

impl Outcome {
    pub fn new(dir: &Path, inputs: Inputs, seed: Option<u64>) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs,
            seed,
            written: Vec::new(),
            failure: None,
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))?;
        self.written.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> shotnoise::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(mut self, command: &str, args: &RunArgs, wall_time_secs: f64) -> Result<(), CliError> {
        let inputs: Vec<FileDigest> = self
            .inputs
            .files
            .iter()
            .map(|(p, b)| FileDigest {
                path: p.display().to_string(),
                sha256: sha256_hex(b),
            })
            .collect();
        let combined: String = inputs.iter().map(|d| format!("{}\n", d.sha256)).collect();
        let manifest = Manifest {
            tool: "shotnoise",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: args.config.display().to_string(),
            inputs_sha256: sha256_hex(combined.as_bytes()),
            inputs,
            seed: self.seed,
            seed_source: match (self.seed, args.seed) {
                (None, _) => "unused",
                (Some(_), Some(_)) => "command line",
                (Some(_), None) => "config",
            },
            threads: rayon::current_num_threads(),
            artifacts: self
                .written
                .iter()
                .map(|(p, h)| FileDigest {
                    path: p.clone(),
                    sha256: h.clone(),
                })
                .collect(),
            wall_time_secs,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(self.dir.join("manifest.json"), text + "\n")?;
        match self.failure.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
