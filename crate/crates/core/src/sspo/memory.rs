//! Per-sample feedback memory and its framed on-disk form.
//!
//! File layout: a `RAPOMEM1` line, a JSON header line `{"sample_id": ..}`,
//! then one frame per record: `<byte length>:<16 hex of sha256>:<json>`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::providers::{MisalignmentReport, VerifierScore, VideoRef};
use crate::refine::{Branch, CandidatePrompt};
use crate::templates::HistoryLine;

pub const MEMORY_MAGIC: &str = "RAPOMEM1";
pub const AGGREGATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("record for iteration {got} cannot follow {len} records")]
    Gap { got: u32, len: usize },
    #[error("record {iteration}: stored S {stored} differs from mean of scores {recomputed}")]
    Aggregate {
        iteration: u32,
        stored: f64,
        recomputed: f64,
    },
    #[error("record {iteration} has no verifier scores")]
    NoScores { iteration: u32 },
    #[error("record {iteration}: prompt is on branch {branch}, expected sspo-{iteration}")]
    Branch { iteration: u32, branch: Branch },
    #[error("record belongs to sample {got}, memory is for {expected}")]
    Sample { got: String, expected: String },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn aggregate(scores: &[VerifierScore]) -> f64 {
    scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub iteration: u32,
    pub prompt: CandidatePrompt,
    pub video: VideoRef,
    pub misalignment: MisalignmentReport,
    pub scores: Vec<VerifierScore>,
    #[serde(rename = "aggregate_S")]
    pub aggregate_s: f64,
    #[serde(rename = "task_O", default, skip_serializing_if = "Option::is_none")]
    pub task_o: Option<VerifierScore>,
}

impl FeedbackRecord {
    /// Builds a record with S computed from `scores`.
    pub fn assemble(
        iteration: u32,
        prompt: CandidatePrompt,
        video: VideoRef,
        misalignment: MisalignmentReport,
        scores: Vec<VerifierScore>,
        task_o: Option<VerifierScore>,
    ) -> Result<Self, MemoryError> {
        if scores.is_empty() {
            return Err(MemoryError::NoScores { iteration });
        }
        Ok(Self {
            iteration,
            prompt,
            video,
            misalignment,
            aggregate_s: aggregate(&scores),
            scores,
            task_o,
        })
    }

    pub fn score(&self, metric: &str) -> Option<f64> {
        if metric == "S" {
            return Some(self.aggregate_s);
        }
        self.scores
            .iter()
            .chain(self.task_o.as_ref())
            .find(|s| s.verifier_name == metric)
            .map(|s| s.value)
    }

    pub fn history_line(&self) -> HistoryLine {
        HistoryLine {
            prompt: self.prompt.text.clone(),
            missing_elements: self.misalignment.missing_elements.clone(),
            contradictions: self.misalignment.contradictions.clone(),
            assessment: self.misalignment.free_text.clone(),
            aggregate: self.aggregate_s,
            task: self.task_o.as_ref().map(|s| s.value),
        }
    }

    fn check(&self) -> Result<(), MemoryError> {
        if self.scores.is_empty() {
            return Err(MemoryError::NoScores {
                iteration: self.iteration,
            });
        }
        let recomputed = aggregate(&self.scores);
        if (recomputed - self.aggregate_s).abs() > AGGREGATE_TOLERANCE {
            return Err(MemoryError::Aggregate {
                iteration: self.iteration,
                stored: self.aggregate_s,
                recomputed,
            });
        }
        if self.prompt.branch != Branch::SspoIter(self.iteration) {
            return Err(MemoryError::Branch {
                iteration: self.iteration,
                branch: self.prompt.branch,
            });
        }
        Ok(())
    }
}

/// Append-only, gapless history for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMemory {
    pub sample_id: String,
    records: Vec<FeedbackRecord>,
}

impl FeedbackMemory {
    pub fn new(sample_id: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.into(),
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[FeedbackRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&FeedbackRecord> {
        self.records.last()
    }

    pub fn append(&mut self, record: FeedbackRecord) -> Result<(), MemoryError> {
        if record.iteration as usize != self.records.len() {
            return Err(MemoryError::Gap {
                got: record.iteration,
                len: self.records.len(),
            });
        }
        if record.prompt.sample_id != self.sample_id {
            return Err(MemoryError::Sample {
                got: record.prompt.sample_id.clone(),
                expected: self.sample_id.clone(),
            });
        }
        record.check()?;
        self.records.push(record);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = header(&self.sample_id);
        for r in &self.records {
            s.push_str(&frame(r));
        }
        s
    }

    /// Writes the whole memory through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.render()).map_err(|source| io(&tmp, source))?;
        fs::rename(&tmp, path).map_err(|source| io(path, source))
    }

    /// Appends one framed record to `path`, creating the file if needed.
    /// The record must already be in this memory.
    pub fn append_to_file(&self, path: &Path, record: &FeedbackRecord) -> Result<(), MemoryError> {
        if !path.exists() {
            return self.save(path);
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|source| io(path, source))?;
        f.write_all(frame(record).as_bytes())
            .and_then(|_| f.sync_data())
            .map_err(|source| io(path, source))
    }
}

fn io(path: &Path, source: std::io::Error) -> MemoryError {
    MemoryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    sample_id: String,
}

fn header(sample_id: &str) -> String {
    let h = serde_json::to_string(&Header {
        sample_id: sample_id.to_string(),
    })
    .expect("header serializes");
    format!("{MEMORY_MAGIC}\n{h}\n")
}

fn digest16(body: &str) -> String {
    hex::encode(&Sha256::digest(body.as_bytes())[..8])
}

fn frame(record: &FeedbackRecord) -> String {
    let body = serde_json::to_string(record).expect("record serializes");
    format!("{}:{}:{body}\n", body.len(), digest16(&body))
}

fn unframe(line: &str) -> Result<FeedbackRecord, String> {
    let mut parts = line.splitn(3, ':');
    let (Some(len), Some(hash), Some(body)) = (parts.next(), parts.next(), parts.next()) else {
        return Err("malformed frame".into());
    };
    let len: usize = len.parse().map_err(|_| "bad frame length")?;
    if body.len() != len {
        return Err(format!("frame length {len} but {} bytes", body.len()));
    }
    if digest16(body) != hash {
        return Err("frame checksum mismatch".into());
    }
    serde_json::from_str(body).map_err(|e| format!("bad record: {e}"))
}

/// Parsed memory plus the number of trailing frames dropped as incomplete.
#[derive(Debug)]
pub struct RecoveredMemory {
    pub memory: FeedbackMemory,
    pub dropped_tail: usize,
}

/// Reads a memory file. With `lenient`, a damaged final frame (an
/// interrupted append) is dropped; damage anywhere else is always an error.
pub fn parse_memory(content: &str, path: &Path, lenient: bool) -> Result<RecoveredMemory, MemoryError> {
    let corrupt = |message: String| MemoryError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = content.split_inclusive('\n');
    match lines.next() {
        Some(l) if l.trim_end() == MEMORY_MAGIC => {}
        _ => return Err(corrupt(format!("missing {MEMORY_MAGIC} magic"))),
    }
    let head: Header = lines
        .next()
        .ok_or_else(|| corrupt("missing header".into()))
        .and_then(|l| serde_json::from_str(l.trim_end()).map_err(|e| corrupt(format!("bad header: {e}"))))?;
    let mut memory = FeedbackMemory::new(head.sample_id);
    let frames: Vec<&str> = lines.collect();
    for (i, raw) in frames.iter().enumerate() {
        let last = i + 1 == frames.len();
        let parsed = match raw.strip_suffix('\n') {
            Some(line) => unframe(line),
            None => Err("unterminated frame".into()),
        };
        match parsed {
            Ok(record) => memory.append(record).map_err(|e| corrupt(e.to_string()))?,
            Err(_) if last && lenient => {
                return Ok(RecoveredMemory {
                    memory,
                    dropped_tail: 1,
                });
            }
            Err(e) => return Err(corrupt(format!("frame {i}: {e}"))),
        }
    }
    Ok(RecoveredMemory {
        memory,
        dropped_tail: 0,
    })
}

pub fn load_memory(path: &Path, lenient: bool) -> Result<RecoveredMemory, MemoryError> {
    let content = fs::read_to_string(path).map_err(|source| io(path, source))?;
    parse_memory(&content, path, lenient)
}
