use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation: enough to re-run it and to check that
/// the re-run reproduced every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub inputs: Vec<FileHash>,
    /// SHA-256 over the config echo and the input file hashes.
    pub input_hash: String,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<FileHash>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_inputs(config: &serde_json::Value, inputs: &[FileHash]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("json value serializes"));
    for f in inputs {
        h.update(f.path.as_bytes());
        h.update([0]);
        h.update(f.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Hashes `files`, naming them relative to `base` when possible.
pub fn hash_files(base: &Path, files: &[PathBuf]) -> Result<Vec<FileHash>, CliError> {
    files
        .iter()
        .map(|p| {
            let name = p.strip_prefix(base).unwrap_or(p);
            Ok(FileHash {
                path: name.to_string_lossy().into_owned(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub struct ManifestBuilder {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    started: u128,
    inputs: Vec<FileHash>,
}

impl ManifestBuilder {
    pub fn start(command: &str, argv: &[String], config: serde_json::Value, seed: u64, inputs: &[&Path]) -> Result<Self, CliError> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.to_string_lossy().into_owned(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        Ok(ManifestBuilder {
            command: command.into(),
            argv: argv.to_vec(),
            config,
            seed,
            started: now_ms(),
            inputs,
        })
    }

    /// Hashes the artifacts and writes the manifest to `path`.
    pub fn finish(self, path: &Path, artifacts: &[PathBuf]) -> Result<RunManifest, CliError> {
        let base = path.parent().unwrap_or(Path::new(""));
        let m = RunManifest {
            input_hash: hash_inputs(&self.config, &self.inputs),
            command: self.command,
            argv: self.argv,
            config: self.config,
            seed: self.seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            inputs: self.inputs,
            artifacts: hash_files(base, artifacts)?,
        };
        let json = serde_json::to_vec_pretty(&m).map_err(CliError::internal)?;
        std::fs::write(path, json).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        Ok(m)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}
