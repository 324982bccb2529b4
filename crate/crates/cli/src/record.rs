//! Append-only run records and the on-disk artifact layout.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use apsense_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub started_at: String,
    pub duration_ms: u128,
    pub seed: u64,
    pub config_sha256: String,
    pub outputs: Vec<PathBuf>,
    pub version: String,
}

/// Append one JSON line to `path`.
pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Where each command reads and writes, relative to the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("run_records.jsonl")
    }

    pub fn stage(&self, command: &str) -> PathBuf {
        self.root.join(command)
    }

    pub fn hotspots_csv(&self) -> PathBuf {
        self.stage("cluster").join("hotspots.csv")
    }

    pub fn hotspots_geojson(&self) -> PathBuf {
        self.stage("cluster").join("hotspots.geojson")
    }

    pub fn noise_csv(&self) -> PathBuf {
        self.stage("cluster").join("noise.csv")
    }

    pub fn fetch_dir(&self) -> PathBuf {
        self.stage("fetch")
    }

    pub fn manifest(&self) -> PathBuf {
        self.fetch_dir().join("manifest.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.stage("train").join("model.safetensors")
    }

    pub fn explain_index(&self) -> PathBuf {
        self.stage("explain").join("explanations.csv")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.stage("evaluate").join("metrics.csv")
    }
}

/// Fail with an error naming the command that produces `path`.
pub fn require(path: &Path, producer: &str) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: format!("run `apsense {producer}` first"),
        })
    }
}
