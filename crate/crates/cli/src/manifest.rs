//! Reproducibility record written before any long computation.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub subcommand: String,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub code_version: String,
    /// Named seed substreams.
    pub seeds: Vec<(String, u64)>,
    pub started_unix: u64,
    pub outputs: Vec<PathBuf>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &serde_json::Value, seeds: Vec<(String, u64)>, outputs: Vec<PathBuf>) -> Self {
        Self {
            command_line: std::env::args().collect(),
            subcommand: subcommand.to_string(),
            config_hash: config_hash(config),
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            seeds,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs,
        }
    }

    /// Writes `dir/run_manifest.json`, or `run_manifest.N.json` when earlier
    /// runs already left one there; existing manifests are never replaced.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        for n in 0.. {
            let path = if n == 0 {
                dir.join(FILE_NAME)
            } else {
                dir.join(format!("run_manifest.{n}.json"))
            };
            match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    std::io::Write::write_all(&mut f, text.as_bytes())?;
                    return Ok(path);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!()
    }
}
