use std::fs;
use std::path::{Path, PathBuf};

use pote_core::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const DATA_FILE: &str = "data.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
}

/// Top-level record of everything written under `--out-dir`. Each command
/// updates it in place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Commands run against this directory, oldest first.
    pub commands: Vec<String>,
    pub dataset: String,
    pub data_path: PathBuf,
    pub data_checksum: String,
    pub config: ExperimentConfig,
    /// SHA-256 of the config's JSON form.
    pub config_hash: String,
    /// Trained snapshots, one entry per seed.
    pub seeds: Vec<SeedArtifacts>,
    /// Everything else (data, reports), replaced by name on rewrite.
    pub outputs: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

/// Writes `contents` to `root/rel` and returns its artifact record.
pub fn write_artifact(
    root: &Path,
    rel: impl AsRef<Path>,
    name: &str,
    contents: &[u8],
) -> Result<Artifact> {
    let rel = rel.as_ref().to_path_buf();
    let path = root.join(&rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    fs::write(&path, contents).map_err(CliError::io(&path))?;
    Ok(Artifact {
        name: name.to_string(),
        path: rel,
        sha256: sha256_hex(contents),
    })
}

/// Records an artifact already written by another writer.
pub fn record_artifact(root: &Path, rel: impl AsRef<Path>, name: &str) -> Result<Artifact> {
    let rel = rel.as_ref().to_path_buf();
    let path = root.join(&rel);
    let bytes = fs::read(&path).map_err(CliError::io(&path))?;
    Ok(Artifact {
        name: name.to_string(),
        path: rel,
        sha256: sha256_hex(&bytes),
    })
}

impl Manifest {
    pub fn new(
        dataset: &str,
        data_path: PathBuf,
        data_checksum: String,
        config: ExperimentConfig,
    ) -> Result<Self> {
        Ok(Manifest {
            commands: Vec::new(),
            dataset: dataset.to_string(),
            data_path,
            data_checksum,
            config_hash: config_hash(&config)?,
            config,
            seeds: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn set_config(&mut self, config: ExperimentConfig) -> Result<()> {
        self.config_hash = config_hash(&config)?;
        self.config = config;
        Ok(())
    }

    pub fn put_output(&mut self, artifact: Artifact) {
        self.outputs.retain(|a| a.name != artifact.name);
        self.outputs.push(artifact);
    }

    pub fn put_seed(&mut self, seed: SeedArtifacts) {
        self.seeds.retain(|s| s.seed != seed.seed);
        self.seeds.push(seed);
        self.seeds.sort_by_key(|s| s.seed);
    }

    pub fn find(&self, seed: u64, name: &str) -> Option<&Artifact> {
        self.seeds
            .iter()
            .find(|s| s.seed == seed)?
            .artifacts
            .iter()
            .find(|a| a.name == name)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(CliError::io(&path))
    }

    pub fn read(out_dir: &Path) -> Result<Manifest> {
        let path = out_dir.join(MANIFEST);
        if !path.exists() {
            return Err(pote_core::Error::MissingArtifact(path).into());
        }
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}
