//! The run manifest: artifact paths with checksums and per-stage logs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::EpochRecord;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifacts: Vec<Artifact>,
    /// Training logs keyed by run name (one per teacher in the teacher stage).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub logs: BTreeMap<String, Vec<EpochRecord>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_snapshot: String,
    pub config_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_fingerprint: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Builds an artifact entry for `rel` under `run_dir`, hashing the file.
    pub fn artifact(run_dir: &Path, rel: &str) -> Result<Artifact> {
        Ok(Artifact { path: rel.to_owned(), sha256: sha256_file(&run_dir.join(rel))? })
    }

    /// Checks that every listed artifact exists with its recorded checksum.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for (stage, rec) in &self.stages {
            for a in &rec.artifacts {
                let found = sha256_file(&run_dir.join(&a.path))?;
                if found != a.sha256 {
                    return Err(Error::Config(format!(
                        "artifact {} of stage {stage} changed since it was recorded",
                        a.path
                    )));
                }
            }
        }
        Ok(())
    }
}
