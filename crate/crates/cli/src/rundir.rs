//! Run directory selection, exclusive locking and the JSON event stream.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use serde_json::{json, Value};

use crate::error::{AppError, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const LOCK_FILE: &str = "run.lock";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const SUBRUNS_DIR: &str = "subruns";

/// Held for the life of a run; removes the lock file on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                AppError::stage("lock", format!("{} is locked by another run ({})", dir.display(), path.display()))
            } else {
                AppError::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "pid={} at={}", std::process::id(), Utc::now().to_rfc3339());
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn manifest_hash(dir: &Path) -> Option<String> {
    RunManifest::load(dir).ok().map(|m| m.config_sha256)
}

fn is_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_none()).unwrap_or(true)
}

/// Picks the directory for a run rooted at `root`.
///
/// The root itself when it is new or holds a run of the same config
/// (resume); else the newest subrun with that config; else a fresh
/// timestamped subrun. `fresh` always creates a new subrun when the root is
/// taken. Existing runs are never overwritten.
pub fn select_run_dir(root: &Path, config_hash: &str, fresh: bool) -> Result<(PathBuf, bool)> {
    if !root.exists() || (is_empty_dir(root) && !root.join(MANIFEST_FILE).exists()) {
        std::fs::create_dir_all(root).map_err(|e| AppError::io(root, e))?;
        return Ok((root.to_path_buf(), false));
    }
    if !root.join(MANIFEST_FILE).exists() && !root.join(SUBRUNS_DIR).exists() {
        return Err(AppError::Usage(format!(
            "{} exists, is not empty and holds no run manifest",
            root.display()
        )));
    }
    if !fresh {
        if manifest_hash(root).as_deref() == Some(config_hash) {
            return Ok((root.to_path_buf(), true));
        }
        let subs = root.join(SUBRUNS_DIR);
        if let Ok(entries) = std::fs::read_dir(&subs) {
            let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
            dirs.sort();
            if let Some(d) = dirs.into_iter().rev().find(|d| manifest_hash(d).as_deref() == Some(config_hash)) {
                return Ok((d, true));
            }
        }
    }
    let stamp = Utc::now().format("%Y%m%dT%H%M%S").to_string();
    let subs = root.join(SUBRUNS_DIR);
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let d = subs.join(name);
        if !d.exists() {
            std::fs::create_dir_all(&d).map_err(|e| AppError::io(&d, e))?;
            return Ok((d, false));
        }
    }
    unreachable!()
}

/// Append-only line-delimited JSON events.
pub struct EventLog {
    file: Mutex<File>,
}

impl EventLog {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(EVENTS_FILE);
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| AppError::io(&path, e))?;
        Ok(EventLog { file: Mutex::new(file) })
    }

    pub fn emit(&self, event: &str, fields: Value) {
        let mut obj = json!({ "ts": Utc::now().to_rfc3339(), "event": event });
        if let (Some(o), Value::Object(extra)) = (obj.as_object_mut(), fields) {
            o.extend(extra);
        }
        let mut f = self.file.lock().expect("event log poisoned");
        let _ = writeln!(f, "{obj}");
    }
}

/// Resolves `out` inside `run_dir`; absolute paths must already lie there.
pub fn confine(run_dir: &Path, out: &Path) -> Result<PathBuf> {
    let candidate = if out.is_absolute() { out.to_path_buf() } else { run_dir.join(out) };
    let mut normal = PathBuf::new();
    for c in candidate.components() {
        match c {
            std::path::Component::ParentDir => {
                if !normal.pop() {
                    return Err(AppError::Usage(format!("{} escapes the run directory", out.display())));
                }
            }
            std::path::Component::CurDir => {}
            other => normal.push(other.as_os_str()),
        }
    }
    let root = normalize(run_dir);
    if !normal.starts_with(&root) || normal == root {
        return Err(AppError::Usage(format!(
            "output {} must lie inside the run directory {}",
            out.display(),
            run_dir.display()
        )));
    }
    Ok(normal)
}

fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            std::path::Component::ParentDir => {
                out.pop();
            }
            std::path::Component::CurDir => {}
            other => out.push(other.as_os_str()),
        }
    }
    out
}
