//! `manifest.json`: which subcommand wrote which file, with content hashes.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub config_sha256: String,
    /// Output path relative to the run directory, to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub feature_version: u32,
    pub runs: BTreeMap<String, Entry>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_bytes(&serde_json::to_vec(cfg).expect("config serializes"))
}

/// Records `outputs` (relative to `dir`) under `command`, replacing the
/// previous entry for it.
pub fn record(dir: &Path, command: &str, cfg: &RunConfig, outputs: &[String]) -> Result<()> {
    let path = dir.join(FILE);
    let mut manifest: Manifest = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).with_context(|| format!("corrupt {}", path.display()))?,
        Err(_) => Manifest::default(),
    };
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_owned();
    manifest.feature_version = toolrank::policy::FEATURE_VERSION;
    let mut entry = Entry {
        config_sha256: config_hash(cfg),
        outputs: BTreeMap::new(),
    };
    for rel in outputs {
        let bytes = std::fs::read(dir.join(rel)).with_context(|| format!("cannot hash {rel}"))?;
        entry.outputs.insert(rel.clone(), sha256_bytes(&bytes));
    }
    manifest.runs.insert(command.to_owned(), entry);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}
