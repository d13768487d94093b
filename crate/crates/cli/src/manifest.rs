//! Per-stage provenance records appended to `manifest.jsonl`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileHash {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct StageRecord {
    pub recipe: String,
    pub stage: usize,
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_secs: f64,
}

pub fn append(path: &Path, record: &StageRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(record)?).with_context(|| format!("writing {}", path.display()))
}
