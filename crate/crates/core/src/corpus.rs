//! Line-delimited prompt corpora.
//!
//! A corpus file holds one record per line. A line is either a flat JSON object
//! with the keys `id`, `text`, `source` and `tags`, or a bare prompt string.
//! Lines that cannot be turned into a valid record are collected into a
//! [`RejectionReport`] rather than dropped.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    TrainingCorpus,
    User,
    Benchmark,
    Generated,
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PromptSource::TrainingCorpus => "training_corpus",
            PromptSource::User => "user",
            PromptSource::Benchmark => "benchmark",
            PromptSource::Generated => "generated",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub source: PromptSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

impl PromptRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: PromptSource) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source,
            tags: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub records: Vec<PromptRecord>,
    pub origin: String,
}

impl Corpus {
    pub fn new(origin: impl Into<String>, records: Vec<PromptRecord>) -> Self {
        Self {
            records,
            origin: origin.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PromptRecord> {
        self.records.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// Zero-based line index, the same numbering used for generated ids.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RejectionReport {
    pub rejections: Vec<Rejection>,
}

impl RejectionReport {
    pub fn is_empty(&self) -> bool {
        self.rejections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rejections.len()
    }

    /// Path of the report that sits beside `corpus_path`.
    pub fn path_for(corpus_path: &Path) -> PathBuf {
        let mut name = corpus_path.as_os_str().to_owned();
        name.push(".rejects");
        PathBuf::from(name)
    }

    pub fn render(&self) -> String {
        self.rejections
            .iter()
            .map(|r| format!("{}\t{}\n", r.line, r.reason))
            .collect()
    }

    /// Writes `<corpus>.rejects`; returns the path written.
    pub fn write_beside(&self, corpus_path: &Path) -> Result<PathBuf, CorpusError> {
        let path = Self::path_for(corpus_path);
        fs::write(&path, self.render()).map_err(|source| CorpusError::Write {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub rejects: RejectionReport,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StructuredLine {
    id: Option<String>,
    text: String,
    source: Option<PromptSource>,
    tags: Option<Vec<String>>,
}

/// Parses corpus text. `stem` seeds generated ids, `default_source` applies to
/// lines that do not name their own source.
pub fn parse_corpus(
    content: &str,
    stem: &str,
    origin: &str,
    default_source: PromptSource,
) -> LoadedCorpus {
    let mut records = Vec::new();
    let mut rejects = RejectionReport::default();
    let mut ids = HashSet::new();

    for (line_no, raw) in content.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let parsed = if line.trim_start().starts_with('{') {
            match serde_json::from_str::<StructuredLine>(line) {
                Ok(s) => Ok(PromptRecord {
                    id: s.id.unwrap_or_else(|| format!("{stem}:{line_no}")),
                    text: s.text,
                    source: s.source.unwrap_or(default_source),
                    tags: s.tags,
                }),
                Err(e) => Err(format!("malformed record: {e}")),
            }
        } else {
            Ok(PromptRecord::new(format!("{stem}:{line_no}"), line, default_source))
        };

        let outcome = parsed.and_then(|rec| {
            if rec.text.trim().is_empty() {
                Err("blank text".to_string())
            } else if rec.id.is_empty() {
                Err("empty id".to_string())
            } else if !ids.insert(rec.id.clone()) {
                Err(format!("duplicate id {}", rec.id))
            } else {
                Ok(rec)
            }
        });

        match outcome {
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.rejections.push(Rejection {
                line: line_no,
                reason,
            }),
        }
    }

    LoadedCorpus {
        corpus: Corpus::new(origin, records),
        rejects,
    }
}

pub fn load_corpus(path: &Path, source: PromptSource) -> Result<LoadedCorpus, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(parse_corpus(
        &content,
        &stem,
        &path.to_string_lossy(),
        source,
    ))
}

/// One structured line per record, always carrying id and source.
pub fn render_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for rec in &corpus.records {
        // PromptRecord serialization cannot fail: all fields are strings or enums.
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let write_err = |source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(write_err)?;
    file.write_all(render_corpus(corpus).as_bytes())
        .map_err(write_err)?;
    file.sync_all().map_err(write_err)
}
