use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mode: String,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Everything needed to audit or repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Training configuration in `key = value` form.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub normalization: NormalizationRecord,
    pub inputs: Vec<FileDigest>,
    /// Output paths are relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
    pub timings_secs: BTreeMap<String, f64>,
    pub created_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Recomputes the digest of every listed output under `dir`.
    pub fn verify_outputs(&self, dir: &Path) -> Result<(), CliError> {
        for out in &self.outputs {
            let path = dir.join(&out.path);
            let got = sha256_file(&path)?;
            if got != out.sha256 {
                return Err(CliError::Data(format!(
                    "{} does not match its manifest digest",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}
