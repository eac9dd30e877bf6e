use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// JSON keys whose values change from run to run and are left out of
/// content hashes.
pub const VOLATILE_KEYS: &[&str] = &["wall_clock_secs", "started_at", "finished_at"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "detail")]
pub enum RunStatus {
    Running,
    Complete,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    /// File name (relative to the run directory) to content hash.
    pub artifacts: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: RunStatus,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn strip_volatile(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            for k in VOLATILE_KEYS {
                map.remove(*k);
            }
            map.values_mut().for_each(strip_volatile);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

/// sha256 of a file. JSON files are hashed in a canonical form without
/// [`VOLATILE_KEYS`].
pub fn content_hash(path: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(path)?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let digest = match (is_json, serde_json::from_slice::<serde_json::Value>(&bytes)) {
        (true, Ok(mut v)) => {
            strip_volatile(&mut v);
            Sha256::digest(v.to_string())
        }
        _ => Sha256::digest(&bytes),
    };
    Ok(hex::encode(digest))
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            config_hash,
            artifacts: BTreeMap::new(),
            started_at: unix_now(),
            finished_at: None,
            status: RunStatus::Running,
        }
    }

    /// The manifest in `dir` if it belongs to the same config, else a fresh one.
    pub fn open(dir: &Path, config_hash: &str) -> Self {
        std::fs::read(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok())
            .filter(|m| m.config_hash == config_hash)
            .map(|mut m| {
                m.status = RunStatus::Running;
                m.finished_at = None;
                m
            })
            .unwrap_or_else(|| Self::new(config_hash.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn record(&mut self, dir: &Path, file: &str) -> Result<(), HarnessError> {
        let hash = content_hash(&dir.join(file))?;
        self.artifacts.insert(file.to_string(), hash);
        Ok(())
    }

    /// Records an artifact that may live outside the run directory.
    pub fn record_as(&mut self, key: String, path: &Path) -> Result<(), HarnessError> {
        let hash = content_hash(path)?;
        self.artifacts.insert(key, hash);
        Ok(())
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.status = status;
        self.finished_at = Some(unix_now());
    }

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}
