//! Run provenance: config digests and the per-command manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};

/// SHA-256 over the canonical TOML form of any config value.
pub fn config_digest<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let text = toml::to_string(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_hex(bytes: &[u8; 32]) -> String {
    hex(bytes)
}

/// Provenance record written atomically at the end of every CLI command.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub versions: BTreeMap<String, String>,
    pub duration_secs: f64,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config_digest: String, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("anosynth".to_string(), env!("CARGO_PKG_VERSION").to_string());
        RunManifest {
            command: command.into(),
            config_digest,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions,
            duration_secs: 0.0,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    /// Serialize to JSON and move into place via a temp file.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        let tmp = path.with_extension("manifest.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&json).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(e.to_string()))
    }
}
