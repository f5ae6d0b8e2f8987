//! Stage provenance records and the working-directory lock.
//!
//! Every completed stage leaves `<work_dir>/meta/<stage>.meta.json`:
//!
//! ```text
//! {"stage":"mine","config_hash":"…","seed":0,"version":"0.1.0",
//!  "inputs":{"scores.jsonl":"<sha256>"},"outputs":{"mining.jsonl":"<sha256>"}}
//! ```
//!
//! Artifact names are paths relative to the working directory when they live
//! inside it, absolute otherwise. The lock file `<work_dir>/.micl.lock` holds
//! `{"pid":…,"command":"…","started_unix":…}` for as long as a run is active.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_file, write_json};

pub const LOCK_FILE: &str = ".micl.lock";
pub const META_DIR: &str = "meta";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Artifact name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn meta_path(work: &Path, stage: &str) -> PathBuf {
    work.join(META_DIR).join(format!("{stage}.meta.json"))
}

pub fn read_meta(work: &Path, stage: &str) -> Result<Option<StageMeta>> {
    let p = meta_path(work, stage);
    if !p.exists() {
        return Ok(None);
    }
    read_json(&p).map(Some)
}

pub fn write_meta(work: &Path, meta: &StageMeta) -> Result<()> {
    write_json(&meta_path(work, &meta.stage), meta)
}

pub fn artifact_name(work: &Path, p: &Path) -> String {
    p.strip_prefix(work).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn artifact_path(work: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        work.join(p)
    }
}

/// Hashes `paths`, keyed by artifact name.
pub fn hash_artifacts(work: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((artifact_name(work, p), sha256_file(p)?)))
        .collect()
}

/// The first recorded output whose file is gone or changed, with the reason.
pub fn first_mismatch(work: &Path, recorded: &BTreeMap<String, String>) -> Option<(String, String)> {
    for (name, hash) in recorded {
        let p = artifact_path(work, name);
        match sha256_file(&p) {
            Ok(h) if &h == hash => {}
            Ok(_) => return Some((name.clone(), "contents changed since it was written".into())),
            Err(_) => return Some((name.clone(), "file is missing".into())),
        }
    }
    None
}

#[derive(Debug, Serialize, Deserialize)]
struct LockInfo {
    pid: u32,
    command: String,
    started_unix: u64,
}

/// Exclusive hold on a working directory; released on drop.
#[derive(Debug)]
pub struct WorkLock {
    path: PathBuf,
}

impl WorkLock {
    pub fn acquire(work: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(work).map_err(|e| Error::io(work, e))?;
        let path = work.join(LOCK_FILE);
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&path).unwrap_or_default();
                return Err(Error::Locked {
                    path,
                    holder: holder.trim().to_string(),
                });
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let info = LockInfo {
            pid: std::process::id(),
            command: command.to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let body = serde_json::to_string(&info).expect("lock info serializes");
        file.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for WorkLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
