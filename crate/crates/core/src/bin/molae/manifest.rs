use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl Artifact {
    pub fn new(path: &Path, bytes: &[u8]) -> Self {
        Self { path: path.display().to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) }
    }
}

/// Record of one CLI invocation. Contains no timestamps so identical runs
/// produce identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub options: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub summary: Value,
}

impl RunManifest {
    pub fn new(command: &'static str, options: Value, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            options,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Value::Null,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `<output>.manifest.json` next to the primary output, or
/// `molae-<command>.manifest.json` in the working directory.
pub fn default_path(command: &str, output: Option<&Path>) -> PathBuf {
    match output {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("molae-{command}.manifest.json")),
    }
}
