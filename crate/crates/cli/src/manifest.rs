//! Run manifest: hashes of inputs, per-stage counters, and the output index.
//!
//! The manifest is the only pipeline artifact allowed to contain a
//! timestamp; everything else must be byte-identical across reruns of the
//! same config and inputs.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub created_utc: String,
    pub config_hash: String,
    pub input_hashes: Vec<(String, String)>,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<String>,
    pub failure_stage: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(config_bytes: &[u8]) -> RunManifest {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            created_utc: chrono::Utc::now().to_rfc3339(),
            config_hash: sha256_hex(config_bytes),
            input_hashes: Vec::new(),
            stages: Vec::new(),
            outputs: Vec::new(),
            failure_stage: None,
        }
    }

    pub fn hash_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.input_hashes.push((label.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    pub fn stage_ok(&mut self, name: &str, detail: String) {
        self.stages.push(StageRecord { name: name.to_string(), status: "ok".into(), detail });
    }

    pub fn stage_failed(&mut self, name: &str, detail: String) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: "failed".into(),
            detail,
        });
        self.failure_stage = Some(name.to_string());
    }

    pub fn record_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
