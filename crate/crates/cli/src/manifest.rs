//! Run manifest: stage history and a hashed artifact inventory.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    /// Completed by an earlier invocation; artifacts verified, not recomputed.
    Reused,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    /// Stopped before the last stage by request.
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub seconds: f64,
    /// Run-relative paths written by this stage.
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub toolkit_version: String,
    pub run_name: String,
    pub config_sha256: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub status: RunStatus,
    /// Every requested stage was reused on the latest invocation.
    pub reused: bool,
    pub invocations: usize,
    pub split_fingerprint: Option<String>,
    pub stages: Vec<StageRecord>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Metric report JSON files, run-relative.
    pub reports: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<ArtifactEntry> {
    let mut f = std::fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(|e| AppError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(ArtifactEntry { sha256: hex::encode(hasher.finalize()), bytes })
}

/// Run-relative files under `rel` (a file or a directory), sorted.
pub fn list_files(root: &Path, rel: &str) -> Result<Vec<String>> {
    let path = root.join(rel);
    if path.is_file() {
        return Ok(vec![rel.to_string()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| AppError::io(&dir, e))? {
            let p = entry.map_err(|e| AppError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let r = p.strip_prefix(root).expect("under root");
                out.push(r.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

impl RunManifest {
    pub fn new(run_name: &str, config_sha256: &str) -> Self {
        let now = Utc::now();
        RunManifest {
            format: MANIFEST_FORMAT,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            run_name: run_name.to_string(),
            config_sha256: config_sha256.to_string(),
            created_at: now,
            updated_at: now,
            status: RunStatus::Running,
            reused: false,
            invocations: 0,
            split_fingerprint: None,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
            reports: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(AppError::Data(format!("{}: unsupported manifest format {}", path.display(), m.format)));
        }
        Ok(m)
    }

    /// Writes via a temporary file so a crash never leaves a torn manifest.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated_at = Utc::now();
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?).map_err(|e| AppError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| AppError::io(&path, e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.name == name)
    }

    /// True when `name` finished earlier and every file it wrote still hashes
    /// to the recorded value.
    pub fn stage_reusable(&self, dir: &Path, name: &str) -> bool {
        let Some(s) = self.stage(name) else { return false };
        matches!(s.status, StageStatus::Completed | StageStatus::Reused)
            && s.artifacts.iter().all(|a| self.verify_artifact(dir, a).is_ok())
    }

    pub fn record_artifacts(&mut self, dir: &Path, rels: &[String]) -> Result<()> {
        for rel in rels {
            self.artifacts.insert(rel.clone(), sha256_file(&dir.join(rel))?);
        }
        Ok(())
    }

    pub fn verify_artifact(&self, dir: &Path, rel: &str) -> Result<()> {
        let entry = self
            .artifacts
            .get(rel)
            .ok_or_else(|| AppError::Data(format!("artifact {rel} missing from inventory")))?;
        let path = dir.join(rel);
        if !path.is_file() {
            return Err(AppError::Data(format!("artifact {rel} does not exist")));
        }
        let actual = sha256_file(&path)?;
        if &actual != entry {
            return Err(AppError::Data(format!("artifact {rel} hash mismatch")));
        }
        Ok(())
    }

    /// Every listed artifact exists and its hash matches.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for rel in self.artifacts.keys() {
            self.verify_artifact(dir, rel)?;
        }
        Ok(())
    }

    pub fn report_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.reports.iter().map(|r| dir.join(r)).collect()
    }
}
