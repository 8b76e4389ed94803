use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance record written next to every output.
#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub library_version: String,
    pub threads: Option<usize>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file and of the effective configurations.
    pub hashes: BTreeMap<String, String>,
    pub precision: Option<String>,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Manifest {
    pub fn new(command: &str, threads: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            ..Self::default()
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn hash_file(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.hashes.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Hashes the canonical JSON of an effective configuration.
    pub fn hash_value<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let json = serde_json::to_vec(value)?;
        self.hashes.insert(name.to_string(), sha256_hex(&json));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// `<file>.manifest.json` for file outputs, `<dir>/manifest.json` for directories.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}
