//! The run directory: `run.json` plus per-sample artifacts written by rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("config differs from the snapshot in {path}; use a fresh run directory")]
    SnapshotMismatch { path: PathBuf },
}

fn io(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum State {
    Running,
    Done,
    Partial,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub state: State,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStatus {
    pub state: State,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Call log path relative to the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calls: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub started_at: u64,
    pub config: serde_json::Value,
    #[serde(default)]
    pub stages: BTreeMap<String, StageStatus>,
    /// stage -> sample id -> status
    #[serde(default)]
    pub samples: BTreeMap<String, BTreeMap<String, SampleStatus>>,
}

pub struct RunStore {
    root: PathBuf,
    record: RunRecord,
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, content).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

/// File-name-safe, injective encoding of a sample id.
pub fn sample_key(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.starts_with('.') {
        out.replace_range(..1, "%2E");
    }
    out
}

impl RunStore {
    /// Opens or creates the run. An existing run must have the same snapshot.
    pub fn open(root: &Path, snapshot: serde_json::Value, now: u64) -> Result<Self, StoreError> {
        fs::create_dir_all(root).map_err(|e| io(root, e))?;
        let path = root.join(RUN_FILE);
        let record = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
            let record: RunRecord = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if record.config != snapshot {
                return Err(StoreError::SnapshotMismatch { path });
            }
            record
        } else {
            let digest = Sha256::digest(serde_json::to_vec(&snapshot).expect("snapshot serializes"));
            let record = RunRecord {
                run_id: hex::encode(&digest[..6]),
                started_at: now,
                config: snapshot,
                stages: BTreeMap::new(),
                samples: BTreeMap::new(),
            };
            let store = Self {
                root: root.to_path_buf(),
                record,
            };
            store.persist()?;
            return Ok(store);
        };
        Ok(Self {
            root: root.to_path_buf(),
            record,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, content: &[u8]) -> Result<(), StoreError> {
        write_atomic(&self.path(rel), content)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn persist(&self) -> Result<(), StoreError> {
        let json = serde_json::to_vec_pretty(&self.record).expect("run record serializes");
        write_atomic(&self.root.join(RUN_FILE), &json)
    }

    pub fn set_sample(&mut self, stage: &str, id: &str, status: SampleStatus) {
        self.record
            .samples
            .entry(stage.to_string())
            .or_default()
            .insert(id.to_string(), status);
    }

    pub fn set_stage(&mut self, stage: &str, status: StageStatus) -> Result<(), StoreError> {
        self.record.stages.insert(stage.to_string(), status);
        self.persist()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn snapshot_is_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = RunStore::open(dir.path(), json!({"seed": 1}), 10).unwrap();
        s.set_sample("optimize", "a", SampleStatus {
            state: State::Done,
            error: None,
            calls: None,
        });
        s.persist().unwrap();
        let again = RunStore::open(dir.path(), json!({"seed": 1}), 99).unwrap();
        assert_eq!(again.record().started_at, 10);
        assert_eq!(again.record().samples["optimize"]["a"].state, State::Done);
        assert!(matches!(
            RunStore::open(dir.path(), json!({"seed": 2}), 0),
            Err(StoreError::SnapshotMismatch { .. })
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_atomic(&p, b"x").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"x");
        assert_eq!(fs::read_dir(dir.path().join("a")).unwrap().count(), 1);
    }

    #[test]
    fn keys() {
        assert_eq!(sample_key("prompts:0"), "prompts%3A0");
        assert_eq!(sample_key("../x"), "%2E.%2Fx");
    }

    proptest! {
        #[test]
        fn sample_key_is_injective_and_safe(a in ".{0,12}", b in ".{0,12}") {
            let (ka, kb) = (sample_key(&a), sample_key(&b));
            prop_assert!(ka.bytes().all(|c| c.is_ascii_alphanumeric() || b"-_.%".contains(&c)));
            prop_assert!(!ka.starts_with('.'));
            if a != b {
                prop_assert_ne!(ka, kb);
            }
        }
    }
}
