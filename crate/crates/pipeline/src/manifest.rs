//! Per-command manifests: what ran, with which config and seed, and the
//! digests of everything it read and wrote.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Arguments that re-run the command against the same output root.
    pub args: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    std::io::copy(&mut BufReader::new(File::open(path)?), &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Fails with `RefuseToOverwrite` when `path` holds a manifest written
/// under a different config hash.
pub fn guard(path: &Path, config_hash: &str, force: bool) -> Result<()> {
    if force || !path.exists() {
        return Ok(());
    }
    let old: Manifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if old.config_hash != config_hash {
        return Err(CliError::RefuseToOverwrite {
            path: path.to_path_buf(),
            expected: config_hash.to_string(),
            found: old.config_hash,
        });
    }
    Ok(())
}

/// Builds manifests with paths relative to `root`.
pub struct ManifestBuilder<'a> {
    root: &'a Path,
    manifest: Manifest,
}

impl<'a> ManifestBuilder<'a> {
    pub fn new(root: &'a Path, command: &str, args: Vec<String>, seed: u64, config: serde_json::Value) -> Result<Self> {
        let config_hash = sha256_json(&config)?;
        Ok(Self {
            root,
            manifest: Manifest {
                command: command.to_string(),
                args,
                seed,
                config_hash,
                config,
                inputs: Vec::new(),
                outputs: Vec::new(),
            },
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    fn digest(&self, path: &Path) -> Result<FileDigest> {
        let rel = path.strip_prefix(self.root).unwrap_or(path);
        Ok(FileDigest {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_file(path)?,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = self.digest(path)?;
        self.manifest.inputs.push(d);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let d = self.digest(path)?;
        self.manifest.outputs.push(d);
        Ok(())
    }

    pub fn write(self, path: &Path) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(path.to_path_buf())
    }
}
