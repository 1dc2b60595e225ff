//! Run-directory manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("FAR_GIT_REV"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub verb: String,
    pub build_id: String,
    /// `sha256:` of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub dtype: Option<String>,
    pub argv: Vec<String>,
    pub created_unix: u64,
    pub outputs: Vec<String>,
}

/// Hash of a config value. Object keys are sorted, so equal configs hash equally
/// whatever order they were written in.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always serialize");
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

impl Manifest {
    pub fn new(verb: &str, config: serde_json::Value) -> Self {
        Manifest {
            verb: verb.to_string(),
            build_id: BUILD_ID.to_string(),
            config_hash: config_hash(&config),
            config,
            seeds: BTreeMap::new(),
            dtype: None,
            argv: std::env::args().collect(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn dtype(mut self, dtype: far_core::DType) -> Self {
        self.dtype = Some(format!("{dtype:?}").to_lowercase());
        self
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}
