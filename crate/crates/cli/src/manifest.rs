use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use memtangle_core::Result;

use crate::io::write_atomic;

/// Record of one command or pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    /// Echo of every config that influenced the run.
    pub config: serde_json::Value,
    pub dataset_sha256: String,
    pub seeds: Vec<u64>,
    /// Output file -> sha256.
    pub outputs: BTreeMap<String, String>,
    /// Stage -> wall-clock seconds.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        dataset_sha256: String,
        seeds: Vec<u64>,
    ) -> Self {
        RunManifest {
            version: concat!("memtangle ", env!("CARGO_PKG_VERSION")).to_string(),
            command: command.into(),
            config,
            dataset_sha256,
            seeds,
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}
