//! Run manifests: every CLI invocation records its command, configuration
//! hash, seed, and output digests so runs can be audited and reproduced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Reproducibility record emitted next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// The invoked command line.
    pub command: String,
    /// SHA-256 of the effective configuration document.
    pub config_hash: String,
    pub seed: u64,
    /// Crate version that produced the outputs.
    pub content_version: String,
    /// Wall-clock duration in seconds (informational; not reproducible).
    pub elapsed_seconds: f64,
    /// SHA-256 digest per output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_bytes: &[u8], seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: hex_digest(config_bytes),
            seed,
            content_version: env!("CARGO_PKG_VERSION").to_string(),
            elapsed_seconds: 0.0,
            outputs: BTreeMap::new(),
        }
    }

    /// Records the digest of one output file.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(name, hex_digest(&bytes));
        Ok(())
    }

    /// Records every regular file in a directory (non-recursive), excluding
    /// the manifest itself.
    pub fn record_directory(&mut self, dir: &Path) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
            .collect();
        entries.sort();
        for path in entries {
            self.record_output(&path)?;
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
