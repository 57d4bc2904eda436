use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use deskbc_core::policy::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// SHA-256 of the effective configuration as JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Tool version plus a content hash per output file (relative path).
    pub version: String,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let config_hash = sha256_hex(&serde_json::to_vec(&config).expect("json serialises"));
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config_hash,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: format!("deskbc {}", env!("CARGO_PKG_VERSION")),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    /// Hashes every file under `out` (except the manifest) and writes the
    /// manifest there.
    pub fn write(mut self, out: &Path) -> Result<(), Failure> {
        self.outputs.push(out.to_path_buf());
        let mut stack = vec![out.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir)? {
                let p = e?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                    let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().into_owned();
                    self.artifacts.insert(rel, sha256_hex(&fs::read(&p)?));
                }
            }
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        fs::write(out.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}
