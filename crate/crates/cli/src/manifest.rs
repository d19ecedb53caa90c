//! `manifest.json`: the artifacts of a run directory with their SHA-256
//! hashes, the resolved-config hash and the code version.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config_sha256: String,
    /// Subcommands that wrote into this directory, in order.
    pub commands: Vec<String>,
    /// Paths relative to the manifest directory.
    pub artifacts: BTreeMap<String, Artifact>,
    /// Wall-clock seconds of the last update; the only nondeterministic field.
    pub updated_unix: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    /// Opens the manifest in `dir`, or starts a new one.
    pub fn open(dir: &Path, config_text: &str) -> Result<Manifest, CliError> {
        let path = dir.join(FILE_NAME);
        let mut m = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
        } else {
            Manifest::default()
        };
        m.code_version = env!("CARGO_PKG_VERSION").to_string();
        m.config_sha256 = sha256_hex(config_text.as_bytes());
        Ok(m)
    }

    /// Hashes `rel` (relative to `dir`) into the artifact table.
    pub fn record(&mut self, dir: &Path, rel: &str) -> Result<(), CliError> {
        let path = dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.insert(rel.to_string(), Artifact { sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn write(&mut self, dir: &Path, command: &str) -> Result<(), CliError> {
        self.commands.push(command.to_string());
        self.updated_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::commands::write_file(&dir.join(FILE_NAME), text.as_bytes())
    }
}
