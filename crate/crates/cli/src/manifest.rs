use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub versions: BTreeMap<&'static str, String>,
    /// Input file name (without directory) to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, deterministic: bool, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_sha256 = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        let versions = BTreeMap::from([
            ("trajgpt", env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format", trajgpt::checkpoint::FORMAT_VERSION.to_string()),
        ]);
        Ok(Self {
            command: command.into(),
            seed,
            deterministic,
            config_sha256,
            config,
            versions,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = if path.is_file() { sha256_hex(&std::fs::read(path)?) } else { "directory".into() };
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.inputs.insert(name, hash);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
