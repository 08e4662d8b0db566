//! Run manifests and content digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = concat!("promptdiv ", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a JSON value. Object keys serialize in sorted order, so equal
/// values always give equal digests.
pub fn digest_json(value: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("json values always serialize"))
}

pub fn file_digest(path: impl AsRef<Path>) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Everything needed to reproduce a command's data outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub file_digests: BTreeMap<String, String>,
    pub tool_version: String,
    pub compressor: String,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, compressor: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config,
            seeds: Vec::new(),
            file_digests: BTreeMap::new(),
            tool_version: TOOL_VERSION.to_string(),
            compressor: compressor.into(),
        }
    }

    /// Records the content digest of an input file under `label`.
    pub fn add_file(&mut self, label: &str, path: impl AsRef<Path>) -> std::io::Result<()> {
        let digest = file_digest(path)?;
        self.file_digests.insert(label.to_string(), digest);
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_value(self).expect("manifest serializes"))
    }
}
