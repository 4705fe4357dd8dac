use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ascan_core::checkpoint::sha256_hex;
use serde::Serialize;

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub spec_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    /// Output file name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> RunManifest {
        RunManifest {
            command: command.into(),
            config,
            seed,
            spec_hash: None,
            checkpoint_hash: None,
            artifacts: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Collects output files for one command and writes the manifest last.
pub struct OutDir {
    pub dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: PathBuf) -> std::io::Result<OutDir> {
        fs::create_dir_all(&dir)?;
        Ok(OutDir { dir, written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes)?;
        self.written.push(p.clone());
        Ok(p)
    }

    /// Registers a file written by someone else.
    pub fn track(&mut self, path: &Path) {
        self.written.push(path.to_path_buf());
    }

    pub fn finish(self, mut manifest: RunManifest) -> std::io::Result<PathBuf> {
        for p in &self.written {
            let name = p.strip_prefix(&self.dir).unwrap_or(p).to_string_lossy().into_owned();
            manifest.artifacts.insert(name, sha256_hex(&fs::read(p)?));
        }
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
