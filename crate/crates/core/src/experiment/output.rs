use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, ExperimentConfig, Seeds};
use super::ExperimentError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRegion {
    pub region: u32,
    pub reason: String,
}

/// What was run, with what, and what it wrote. Timings are the only
/// nondeterministic content of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub versions: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u64>,
    #[serde(default)]
    pub skipped_regions: Vec<SkippedRegion>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, timings_ms: BTreeMap<String, u64>, skipped_regions: Vec<SkippedRegion>) -> Self {
        let versions = [
            ("confed", env!("CARGO_PKG_VERSION")),
            ("cohort_format", "confed-cohort v1"),
            ("params_format", "CFL1"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect();
        RunManifest {
            command: command.to_owned(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds(),
            versions,
            timings_ms,
            skipped_regions,
            files: Vec::new(),
        }
    }
}

/// A run directory whose writes are atomic and inventoried.
pub(crate) struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, FileEntry>,
}

fn io_err(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.files.insert(
            rel.to_owned(),
            FileEntry {
                path: rel.to_owned(),
                sha256: hex(&Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest, ExperimentError> {
        manifest.files = self.files.into_values().collect();
        let mut text = serde_json::to_string_pretty(&manifest).expect("plain struct");
        text.push('\n');
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}
