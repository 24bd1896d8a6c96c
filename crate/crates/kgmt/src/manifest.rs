//! Per-run manifests: what ran, with which configuration, on which files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiment::ExperimentConfig;
use crate::io::{write_json, IoError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A file with its SHA-256 digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub kgmt: String,
    pub kgmt_core: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self { kgmt: env!("CARGO_PKG_VERSION").into(), kgmt_core: kgmt_core::VERSION.into() }
    }
}

/// Record of one command invocation. `args` together with `config` is
/// enough to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_clock_secs: f64,
    pub versions: Versions,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes `path`, or every file below it when it is a directory, in
/// sorted path order. The manifest file itself is skipped.
pub fn hash_tree(path: &Path) -> Result<Vec<FileHash>, IoError> {
    let mut out = Vec::new();
    let meta = fs::metadata(path).map_err(|e| IoError::io(path, e))?;
    if meta.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| IoError::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| IoError::io(path, e)))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            out.extend(hash_tree(&p)?);
        }
    } else {
        let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
        out.push(FileHash { path: path.to_path_buf(), sha256: sha256_hex(&bytes) });
    }
    Ok(out)
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    config: ExperimentConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self { command: command.into(), config: config.clone(), inputs: Vec::new(), outputs: Vec::new(), started: Instant::now() }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn finish(self) -> Result<RunManifest, IoError> {
        let hash_all = |paths: &[PathBuf]| -> Result<Vec<FileHash>, IoError> {
            let mut v = Vec::new();
            for p in paths {
                v.extend(hash_tree(p)?);
            }
            Ok(v)
        };
        Ok(RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            seed: self.config.seed,
            config: self.config,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            versions: Versions::default(),
        })
    }
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf, IoError> {
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, manifest)?;
    Ok(path)
}
