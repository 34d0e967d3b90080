//! Run manifest: resolved config, versions, seeds, artifact hashes, timings
//! and loss traces. Written next to the artifacts as `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rdiff_core::io::{atomic_write, file_sha256};
use rdiff_core::score::TrainReport;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seed: Option<u64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub versions: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub complete: bool,
    pub dry_run: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub artifacts: Vec<ArtifactRecord>,
    pub timings: Vec<Timing>,
    /// Training loss trace per seed.
    pub loss_traces: BTreeMap<u64, TrainReport>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("rdiff-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("file-format".to_string(), rdiff_core::io::FORMAT_VERSION.to_string()),
    ])
}

/// Artifacts and timings collected while a run progresses.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub artifacts: Vec<ArtifactRecord>,
    pub timings: Vec<Timing>,
}

impl RunLog {
    /// Hashes `path` (inside `out`) and records it.
    pub fn record(&mut self, out: &Path, path: &Path) -> CliResult<()> {
        let sha256 = file_sha256(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let bytes = std::fs::metadata(path).map_err(CliError::io(path))?.len();
        self.artifacts.push(ArtifactRecord { path: relative(out, path), sha256, bytes });
        Ok(())
    }

    pub fn time(&mut self, stage: &str, seed: Option<u64>, seconds: f64) {
        self.timings.push(Timing { stage: stage.into(), seed, seconds });
    }

    pub fn extend(&mut self, other: RunLog) {
        self.artifacts.extend(other.artifacts);
        self.timings.extend(other.timings);
    }
}

fn relative(out: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(out).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        Self {
            seeds: config.sweep.seeds.clone(),
            config,
            versions: versions(),
            complete: false,
            dry_run: false,
            failed_stage: None,
            artifacts: Vec::new(),
            timings: Vec::new(),
            loss_traces: BTreeMap::new(),
        }
    }

    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    pub fn write(&self, out: &Path) -> CliResult<()> {
        std::fs::create_dir_all(out).map_err(CliError::io(out))?;
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        let path = Self::path(out);
        atomic_write(&path, &json).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn read(out: &Path) -> CliResult<Option<Self>> {
        let path = Self::path(out);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Validation(format!("unreadable manifest {}: {e}", path.display())))
    }

    /// Problems with the referenced artifacts: missing files and hash
    /// mismatches. Empty when everything matches.
    pub fn verify(&self, out: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        for a in &self.artifacts {
            let path = out.join(&a.path);
            match file_sha256(&path) {
                Ok(h) if h == a.sha256 => {}
                Ok(_) => problems.push(format!("{}: hash mismatch", a.path)),
                Err(_) => problems.push(format!("{}: missing or unreadable", a.path)),
            }
        }
        problems
    }

    pub fn artifact(&self, rel: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.path == rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_detects_missing_and_modified_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let f = out.join("sub").join("a.bin");
        std::fs::create_dir_all(f.parent().unwrap()).unwrap();
        std::fs::write(&f, b"abc").unwrap();
        let mut log = RunLog::default();
        log.record(out, &f).unwrap();
        let mut m = RunManifest::new(RunConfig::smoke());
        m.artifacts = log.artifacts;
        assert_eq!(m.artifacts[0].path, "sub/a.bin");
        assert!(m.verify(out).is_empty());
        m.write(out).unwrap();
        assert_eq!(RunManifest::read(out).unwrap().unwrap(), m);

        std::fs::write(&f, b"abd").unwrap();
        assert_eq!(m.verify(out).len(), 1);
        std::fs::remove_file(&f).unwrap();
        assert!(m.verify(out)[0].contains("missing"));
    }
}
