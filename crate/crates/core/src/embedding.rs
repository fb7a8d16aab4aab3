//! Text embeddings, cosine similarity, and an exact top-k vector index.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::providers::ProviderError;
use crate::text;

/// Leading line of a persisted index file.
pub const INDEX_MAGIC: &str = "RAPOIDX1";

/// Dimension of the mock embedder.
pub const MOCK_DIMENSION: usize = 256;

/// Seed mixed into the FNV-1a offset basis by the mock embedder.
pub const MOCK_HASH_SEED: u64 = 0x5241_504f_4d4f_434b;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no embeddable tokens: {0:?}")]
    NoTokens(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate index entry {0}")]
    DuplicateEntry(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("index file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("index file {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw values without normalizing.
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes `values`; fails on the zero vector.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A text encoder. Implementations return raw vectors; [`embed`] normalizes.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        (**self).embed_raw(text)
    }
}

/// Embeds `text` and returns a unit-length vector of the provider's dimension.
pub fn embed(text: &str, provider: &dyn Embedder) -> Result<EmbeddingVector, EmbeddingError> {
    if text.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let values = provider.embed_raw(text)?;
    if values.len() != provider.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: provider.dimension(),
            actual: values.len(),
        });
    }
    EmbeddingVector::normalized(values).map_err(|e| match e {
        EmbeddingError::ZeroVector => EmbeddingError::NoTokens(text.to_string()),
        other => other,
    })
}

/// Seeded 64-bit FNV-1a.
pub fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET ^ seed, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

/// Hashed bag-of-words embedder: every token adds one to the bucket its hash selects.
///
/// Tokens are lowercased whitespace tokens with edge punctuation removed, so the
/// embedding ignores token order and punctuation.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: MOCK_DIMENSION,
            seed: MOCK_HASH_SEED,
        }
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(self.seed, token.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "mock-hash"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut values = vec![0.0; self.dimension];
        for token in text::words(text) {
            values[self.bucket(&token)] += 1.0;
        }
        Ok(values)
    }
}

/// Memoizes another embedder's raw output per text for the life of the process.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("embedding cache poisoned").len()
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        if let Some(hit) = self.cache.lock().expect("embedding cache poisoned").get(text) {
            return Ok(hit.clone());
        }
        let values = self.inner.embed_raw(text)?;
        self.cache
            .lock()
            .expect("embedding cache poisoned")
            .insert(text.to_string(), values.clone());
        Ok(values)
    }
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dimension(),
            actual: b.dimension(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let denom = match (a.normalized, b.normalized) {
        (true, true) => 1.0,
        _ => {
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                return Err(EmbeddingError::ZeroVector);
            }
            na * nb
        }
    };
    Ok((dot / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub id: String,
    pub score: f64,
}

/// Exact linear-scan index. Insertion order is the tie-break for equal scores.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    entries: Vec<(String, EmbeddingVector)>,
    positions: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            entries: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, EmbeddingVector)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        let id = id.into();
        if vector.dimension() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dimension,
                actual: vector.dimension(),
            });
        }
        if self.positions.contains_key(&id) {
            return Err(EmbeddingError::DuplicateEntry(id));
        }
        self.positions.insert(id.clone(), self.entries.len());
        self.entries.push((id, vector));
        Ok(())
    }

    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredEntry>, EmbeddingError> {
        top_k(query, self, k)
    }
}

/// Highest-scoring `min(k, len)` entries, ties broken by insertion order.
pub fn top_k(query: &EmbeddingVector, index: &VectorIndex, k: usize) -> Result<Vec<ScoredEntry>, EmbeddingError> {
    if k == 0 {
        return Err(EmbeddingError::ZeroK);
    }
    if index.is_empty() {
        return Err(EmbeddingError::EmptyIndex);
    }
    let mut scored = index
        .entries
        .iter()
        .enumerate()
        .map(|(pos, (id, v))| cosine(query, v).map(|s| (pos, id, s)))
        .collect::<Result<Vec<_>, _>>()?;
    // sort_by is stable, so equal scores keep insertion order.
    scored.sort_by(|a, b| b.2.total_cmp(&a.2));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(_, id, score)| ScoredEntry {
            id: id.clone(),
            score,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub dimension: usize,
    pub count: usize,
    pub hash_seed: Option<u64>,
    pub provider: String,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    id: String,
    values: Vec<f64>,
}

/// Writes the index as: magic line, JSON header line, one JSON line per entry.
pub fn save_index(
    index: &VectorIndex,
    provider: &str,
    hash_seed: Option<u64>,
    path: &Path,
) -> Result<(), EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    out.push_str(INDEX_MAGIC);
    out.push('\n');
    let header = IndexHeader {
        dimension: index.dimension,
        count: index.len(),
        hash_seed,
        provider: provider.to_string(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for (id, v) in &index.entries {
        let line = IndexLine {
            id: id.clone(),
            values: v.values.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("entry serializes"));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

pub fn load_index(path: &Path) -> Result<(IndexHeader, VectorIndex), EmbeddingError> {
    let format = |message: String| EmbeddingError::Format {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<Option<String>, EmbeddingError> {
        lines.next().transpose().map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    match next()? {
        Some(m) if m == INDEX_MAGIC => {}
        Some(m) => return Err(format(format!("unsupported format {m:?}, expected {INDEX_MAGIC}"))),
        None => return Err(format("empty file".into())),
    }
    let header: IndexHeader = next()?
        .ok_or_else(|| format("missing header".into()))
        .and_then(|h| serde_json::from_str(&h).map_err(|e| format(format!("bad header: {e}"))))?;
    let mut index = VectorIndex::new(header.dimension);
    while let Some(line) = next()? {
        let entry: IndexLine =
            serde_json::from_str(&line).map_err(|e| format(format!("bad entry: {e}")))?;
        let vector = EmbeddingVector {
            values: entry.values,
            normalized: true,
        };
        index.insert(entry.id, vector)?;
    }
    if index.len() != header.count {
        return Err(format(format!(
            "header declares {} entries, found {}",
            header.count,
            index.len()
        )));
    }
    Ok((header, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::raw(values.to_vec())
    }

    #[test]
    fn cosine_basic_cases() {
        let e = HashEmbedder::default();
        let a = embed("a cat on a mat", &e).unwrap();
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let c = cosine(&v(&[1.0, 0.0]), &v(&[s, s])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!((c - s).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(EmbeddingError::ZeroVector)));
    }

    #[test]
    fn mock_embedding_is_deterministic_and_unit() {
        let e = HashEmbedder::default();
        let a = embed("cat", &e).unwrap();
        assert_eq!(a, embed("cat", &e).unwrap());
        assert_eq!(a.dimension(), 256);

        // independent bag-of-words construction: bucket counts, then L2 norm
        let text = "the quick brown fox the fox";
        let mut counts = [0usize; 256];
        for t in text.split_whitespace() {
            counts[(fnv1a(MOCK_HASH_SEED, t.as_bytes()) % 256) as usize] += 1;
        }
        let norm = counts.iter().map(|c| (c * c) as f64).sum::<f64>().sqrt();
        let got = embed(text, &e).unwrap();
        for (i, c) in counts.iter().enumerate() {
            assert!((got.values[i] - *c as f64 / norm).abs() < 1e-15);
        }
        assert!((got.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mock_embedding_ignores_order() {
        let e = HashEmbedder::default();
        assert_eq!(embed("a b", &e).unwrap(), embed("b a", &e).unwrap());
    }

    #[test]
    fn empty_text_is_precondition_error() {
        let e = HashEmbedder::default();
        assert!(matches!(embed("  ", &e), Err(EmbeddingError::EmptyText)));
        assert!(matches!(embed("!!", &e), Err(EmbeddingError::NoTokens(_))));
    }

    #[test]
    fn cached_embedder_memoizes() {
        let e = CachedEmbedder::new(HashEmbedder::default());
        let a = embed("red fox", &e).unwrap();
        let b = embed("red fox", &e).unwrap();
        assert_eq!(a, b);
        assert_eq!(e.cached_len(), 1);
    }

    #[test]
    fn top_k_clamps_and_breaks_ties_by_insertion() {
        let mut idx = VectorIndex::new(2);
        idx.insert("late", EmbeddingVector::normalized(vec![0.0, 1.0]).unwrap()).unwrap();
        idx.insert("first", EmbeddingVector::normalized(vec![1.0, 1.0]).unwrap()).unwrap();
        idx.insert("second", EmbeddingVector::normalized(vec![1.0, 1.0]).unwrap()).unwrap();
        let q = EmbeddingVector::normalized(vec![1.0, 0.5]).unwrap();
        let got = top_k(&q, &idx, 10).unwrap();
        let ids: Vec<_> = got.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["first", "second", "late"]);
        assert!(matches!(top_k(&q, &VectorIndex::new(2), 1), Err(EmbeddingError::EmptyIndex)));
        assert!(matches!(top_k(&q, &idx, 0), Err(EmbeddingError::ZeroK)));
    }

    #[test]
    fn index_rejects_duplicates_and_wrong_dimension() {
        let mut idx = VectorIndex::new(2);
        idx.insert("a", v(&[1.0, 0.0])).unwrap();
        assert!(matches!(idx.insert("a", v(&[1.0, 0.0])), Err(EmbeddingError::DuplicateEntry(_))));
        assert!(matches!(idx.insert("b", v(&[1.0])), Err(EmbeddingError::DimensionMismatch { .. })));
    }

    #[test]
    fn index_file_round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.idx");
        let e = HashEmbedder::default();
        let mut idx = VectorIndex::new(256);
        for (i, t) in ["kitchen", "beach at dusk", "forest"].iter().enumerate() {
            idx.insert(format!("s{i}"), embed(t, &e).unwrap()).unwrap();
        }
        save_index(&idx, e.name(), Some(e.seed()), &path).unwrap();
        let (header, back) = load_index(&path).unwrap();
        assert_eq!(back, idx);
        assert_eq!(header.provider, "mock-hash");
        assert_eq!(header.count, 3);

        fs::write(&path, "RAPOIDX0\n{}\n").unwrap();
        assert!(matches!(load_index(&path), Err(EmbeddingError::Format { .. })));
    }

    fn random_index(vectors: &[Vec<f64>]) -> VectorIndex {
        let mut idx = VectorIndex::new(4);
        for (i, vals) in vectors.iter().enumerate() {
            idx.insert(format!("e{i}"), EmbeddingVector::raw(vals.clone())).unwrap();
        }
        idx
    }

    proptest! {
        #[test]
        fn top_k_is_prefix_of_full_sort(
            vectors in prop::collection::vec(prop::collection::vec(-2i8..=2, 4), 1..200),
            query in prop::collection::vec(-2i8..=2, 4),
            k in 1usize..20,
        ) {
            let vectors: Vec<Vec<f64>> = vectors.iter()
                .map(|v| v.iter().map(|x| f64::from(*x)).collect())
                .filter(|v: &Vec<f64>| v.iter().any(|x| *x != 0.0))
                .collect();
            prop_assume!(!vectors.is_empty());
            let q: Vec<f64> = query.iter().map(|x| f64::from(*x)).collect();
            prop_assume!(q.iter().any(|x| *x != 0.0));
            let idx = random_index(&vectors);
            let qv = EmbeddingVector::raw(q.clone());

            // oracle: explicit descending selection without sorting helpers
            let mut remaining: Vec<(usize, f64)> = vectors.iter().enumerate().map(|(i, v)| {
                let dot: f64 = v.iter().zip(&q).map(|(a, b)| a * b).sum();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt() * q.iter().map(|a| a * a).sum::<f64>().sqrt();
                (i, (dot / n).clamp(-1.0, 1.0))
            }).collect();
            let mut expected = Vec::new();
            while !remaining.is_empty() && expected.len() < k {
                let mut best = 0;
                for j in 1..remaining.len() {
                    if remaining[j].1 > remaining[best].1 { best = j; }
                }
                expected.push(format!("e{}", remaining.remove(best).0));
            }
            let got: Vec<String> = top_k(&qv, &idx, k).unwrap().into_iter().map(|e| e.id).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn cosine_is_symmetric(a in prop::collection::vec(-1.0f64..1.0, 8), b in prop::collection::vec(-1.0f64..1.0, 8)) {
            prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
            let (a, b) = (EmbeddingVector::raw(a), EmbeddingVector::raw(b));
            prop_assert!((cosine(&a, &b).unwrap() - cosine(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
