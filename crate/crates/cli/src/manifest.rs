use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written before any other artifact so every output directory records how it
/// was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the effective configuration (file plus overrides) as TOML.
    pub config_sha256: String,
    pub config: String,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config_toml: String, seed: Option<u64>, out_dir: &Path) -> Self {
        let digest = Sha256::digest(config_toml.as_bytes());
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_path: config_path.map(Path::to_path_buf),
            config_sha256: hex::encode(digest),
            config: config_toml,
            seed,
            out_dir: out_dir.to_path_buf(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        let path = self.out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
