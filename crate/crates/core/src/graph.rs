//! The relation graph: scenes as core nodes, each holding subject, action and
//! atmosphere modifiers extracted from a training-prompt corpus.
//!
//! Scenes are identified by exact label match after lowercasing and whitespace
//! normalization. Retrieval runs in two stages: the top scenes for a query by
//! embedding similarity, then the top modifiers pooled from those scenes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PromptRecord};
use crate::embedding::{self, embed, Embedder, EmbeddingError, ScoredEntry, VectorIndex};
use crate::providers::{chat, ChatRequest, LlmProvider, ProviderError};
use crate::templates;
use crate::text::normalize_ws;

pub const GRAPH_MAGIC: &str = "RAPOGRF1";
pub const DEFAULT_K_SCENE: usize = 5;
pub const DEFAULT_K_MOD: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("extraction failed for {prompt_id}: {reason} (reply: {reply:?})")]
    Extraction {
        prompt_id: String,
        reason: String,
        reply: String,
    },
    #[error("no prompt produced a valid extraction ({} skipped)", .0.skipped.len())]
    NothingExtracted(BuildReport),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("graph has no scenes")]
    EmptyGraph,
    #[error("graph was built with embedder {built}, query uses {query}")]
    EmbedderMismatch { built: String, query: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{path}: unsupported graph format {found:?}, expected {GRAPH_MAGIC}")]
    Version { path: PathBuf, found: String },
    #[error("{path}: corrupt graph file: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModifierCategory {
    Subject,
    Action,
    Atmosphere,
}

impl ModifierCategory {
    pub const ALL: [ModifierCategory; 3] = [Self::Subject, Self::Action, Self::Atmosphere];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Subject => "subject",
            Self::Action => "action",
            Self::Atmosphere => "atmosphere",
        }
    }
}

impl fmt::Display for ModifierCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModifierCategory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subject" => Ok(Self::Subject),
            "action" => Ok(Self::Action),
            "atmosphere" => Ok(Self::Atmosphere),
            other => Err(format!("unknown modifier category {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifierNode {
    pub text: String,
    pub category: ModifierCategory,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneNode {
    pub scene: String,
    modifiers: [Vec<ModifierNode>; 3],
}

impl SceneNode {
    pub fn new(scene: impl Into<String>) -> Self {
        Self {
            scene: scene.into(),
            modifiers: Default::default(),
        }
    }

    pub fn modifiers(&self, category: ModifierCategory) -> &[ModifierNode] {
        &self.modifiers[category as usize]
    }

    /// All modifiers, subject first, then action, then atmosphere.
    pub fn all_modifiers(&self) -> impl Iterator<Item = &ModifierNode> {
        self.modifiers.iter().flatten()
    }

    /// Adds one occurrence; an existing (category, text) slot gains frequency.
    pub fn add(&mut self, text: &str, category: ModifierCategory, count: u64) {
        let text = normalize_ws(text);
        if text.is_empty() || count == 0 {
            return;
        }
        let slot = &mut self.modifiers[category as usize];
        match slot.iter_mut().find(|m| m.text == text) {
            Some(m) => m.frequency += count,
            None => slot.push(ModifierNode {
                text,
                category,
                frequency: count,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub corpus_origin: String,
    pub extractor: String,
    pub embedder: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    scenes: IndexMap<String, SceneNode>,
    scene_index: VectorIndex,
    pub meta: BuildMeta,
}

/// Scene identity key: lowercase, single-spaced.
pub fn scene_key(label: &str) -> String {
    normalize_ws(&label.to_lowercase())
}

impl RelationGraph {
    /// Builds the scene index over `scenes` in their iteration order.
    pub fn from_scenes(
        scenes: IndexMap<String, SceneNode>,
        embedder: &dyn Embedder,
        meta: BuildMeta,
    ) -> Result<Self, GraphError> {
        let mut scene_index = VectorIndex::new(embedder.dimension());
        for key in scenes.keys() {
            scene_index.insert(key.clone(), embed(key, embedder)?)?;
        }
        Ok(Self {
            scenes,
            scene_index,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, label: &str) -> Option<&SceneNode> {
        self.scenes.get(&scene_key(label))
    }

    pub fn scenes(&self) -> impl Iterator<Item = &SceneNode> {
        self.scenes.values()
    }

    pub fn scene_index(&self) -> &VectorIndex {
        &self.scene_index
    }

    pub fn total_frequency(&self) -> u64 {
        self.scenes().flat_map(|s| s.all_modifiers()).map(|m| m.frequency).sum()
    }

    /// Scene keys and index entry ids are the same set, in the same order.
    pub fn check_bijection(&self) -> bool {
        self.scenes.len() == self.scene_index.len() && self.scenes.keys().map(String::as_str).eq(self.scene_index.ids())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub scene: String,
    pub modifiers: Vec<(String, ModifierCategory)>,
}

/// Parses the extractor reply: one `scene:` line plus any `subject:`, `action:`
/// or `atmosphere:` lines. Anything else is an error.
pub fn parse_extraction(reply: &str) -> Result<Extraction, String> {
    let mut scene = None;
    let mut modifiers = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| format!("line without a key: {line:?}"))?;
        let value = normalize_ws(value);
        match key.trim() {
            "scene" => {
                if scene.is_some() {
                    return Err("more than one scene line".into());
                }
                if value.is_empty() {
                    return Err("empty scene".into());
                }
                scene = Some(value);
            }
            other => {
                let category = other.parse::<ModifierCategory>()?;
                if !value.is_empty() {
                    modifiers.push((value, category));
                }
            }
        }
    }
    let scene = scene.ok_or("reply has no scene line")?;
    Ok(Extraction { scene, modifiers })
}

pub fn extract_scene_and_modifiers(
    prompt: &PromptRecord,
    llm: &dyn LlmProvider,
    seed: Option<u64>,
) -> Result<Extraction, GraphError> {
    if prompt.text.trim().is_empty() {
        return Err(GraphError::Extraction {
            prompt_id: prompt.id.clone(),
            reason: "empty prompt".into(),
            reply: String::new(),
        });
    }
    let req = ChatRequest::new(templates::render_extract(&prompt.text)).with_seed(seed);
    let reply = chat(&req, llm)?;
    parse_extraction(&reply).map_err(|reason| GraphError::Extraction {
        prompt_id: prompt.id.clone(),
        reason,
        reply,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SkippedPrompt {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BuildReport {
    pub extracted: usize,
    pub modifiers_extracted: u64,
    pub skipped: Vec<SkippedPrompt>,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub workers: usize,
    pub timestamp: u64,
    pub seed: Option<u64>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            timestamp: 0,
            seed: None,
        }
    }
}

/// Merges an extraction into the scene map.
pub fn merge_extraction(scenes: &mut IndexMap<String, SceneNode>, extraction: &Extraction) {
    let key = scene_key(&extraction.scene);
    let node = scenes
        .entry(key.clone())
        .or_insert_with(|| SceneNode::new(key));
    for (text, category) in &extraction.modifiers {
        node.add(text, *category, 1);
    }
}

/// Extracts every prompt (fanned out over `workers` threads) and merges the
/// results in corpus order, so the graph does not depend on worker count.
pub fn build_graph(
    corpus: &Corpus,
    llm: &dyn LlmProvider,
    embedder: &dyn Embedder,
    options: &BuildOptions,
) -> Result<(RelationGraph, BuildReport), GraphError> {
    if corpus.is_empty() {
        return Err(GraphError::EmptyCorpus);
    }
    let workers = options.workers.clamp(1, corpus.len());
    let chunk = corpus.len().div_ceil(workers);
    let results: Vec<Result<Extraction, GraphError>> = std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|p| extract_scene_and_modifiers(p, llm, options.seed))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("extraction worker panicked"))
            .collect()
    });

    let mut scenes = IndexMap::new();
    let mut report = BuildReport::default();
    for (prompt, result) in corpus.records.iter().zip(results) {
        match result {
            Ok(extraction) => {
                report.extracted += 1;
                report.modifiers_extracted += extraction.modifiers.len() as u64;
                merge_extraction(&mut scenes, &extraction);
            }
            Err(e) => {
                tracing::warn!(prompt = %prompt.id, error = %e, "skipping prompt");
                report.skipped.push(SkippedPrompt {
                    id: prompt.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if report.extracted == 0 {
        return Err(GraphError::NothingExtracted(report));
    }
    let meta = BuildMeta {
        corpus_origin: corpus.origin.clone(),
        extractor: llm.name().to_string(),
        embedder: embedder.name().to_string(),
        timestamp: options.timestamp,
    };
    Ok((RelationGraph::from_scenes(scenes, embedder, meta)?, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedModifier {
    pub modifier: ModifierNode,
    pub scene: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub scenes: Vec<ScoredEntry>,
    pub modifiers: Vec<RetrievedModifier>,
}

/// Two-stage retrieval; see [`retrieve_modifiers`].
pub fn retrieve(
    graph: &RelationGraph,
    query: &str,
    embedder: &dyn Embedder,
    k_scene: usize,
    k_mod: usize,
) -> Result<Retrieval, GraphError> {
    if graph.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    if embedder.name() != graph.meta.embedder || embedder.dimension() != graph.scene_index.dimension() {
        return Err(GraphError::EmbedderMismatch {
            built: graph.meta.embedder.clone(),
            query: embedder.name().to_string(),
        });
    }
    if k_mod == 0 {
        return Err(EmbeddingError::ZeroK.into());
    }
    let q = embed(query, embedder)?;
    let scenes = embedding::top_k(&q, &graph.scene_index, k_scene)?;

    // pool in scene rank order, deduplicated by (text, category)
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    for hit in &scenes {
        let node = &graph.scenes[&hit.id];
        for m in node.all_modifiers() {
            if seen.insert((m.text.clone(), m.category)) {
                pool.push((m, &node.scene));
            }
        }
    }
    let mut scored = pool
        .into_iter()
        .map(|(m, scene)| {
            let v = embed(&m.text, embedder)?;
            Ok((m, scene, embedding::cosine(&q, &v)?))
        })
        .collect::<Result<Vec<_>, GraphError>>()?;
    scored.sort_by(|a, b| b.2.total_cmp(&a.2));
    scored.truncate(k_mod);
    let modifiers = scored
        .into_iter()
        .map(|(m, scene, score)| RetrievedModifier {
            modifier: m.clone(),
            scene: scene.clone(),
            score,
        })
        .collect();
    Ok(Retrieval { scenes, modifiers })
}

/// Top `k_scene` scenes for the query, then the top `k_mod` of their pooled
/// modifiers scored against the query, ties in pool order.
pub fn retrieve_modifiers(
    graph: &RelationGraph,
    query: &str,
    embedder: &dyn Embedder,
    k_scene: usize,
    k_mod: usize,
) -> Result<Vec<RetrievedModifier>, GraphError> {
    retrieve(graph, query, embedder, k_scene, k_mod).map(|r| r.modifiers)
}

#[derive(Serialize, Deserialize)]
struct SceneBlock {
    scene: String,
    subject: Vec<ModifierLine>,
    action: Vec<ModifierLine>,
    atmosphere: Vec<ModifierLine>,
}

#[derive(Serialize, Deserialize)]
struct ModifierLine {
    text: String,
    frequency: u64,
}

/// Sibling file holding the persisted scene index.
pub fn index_path(graph_path: &Path) -> PathBuf {
    let mut name = graph_path.as_os_str().to_owned();
    name.push(".idx");
    PathBuf::from(name)
}

pub fn render_graph(graph: &RelationGraph) -> String {
    let mut out = String::new();
    out.push_str(GRAPH_MAGIC);
    out.push('\n');
    out.push_str(&serde_json::to_string(&graph.meta).expect("meta serializes"));
    out.push('\n');
    for node in graph.scenes() {
        let lines = |c| {
            node.modifiers(c)
                .iter()
                .map(|m| ModifierLine {
                    text: m.text.clone(),
                    frequency: m.frequency,
                })
                .collect()
        };
        let block = SceneBlock {
            scene: node.scene.clone(),
            subject: lines(ModifierCategory::Subject),
            action: lines(ModifierCategory::Action),
            atmosphere: lines(ModifierCategory::Atmosphere),
        };
        out.push_str(&serde_json::to_string(&block).expect("scene serializes"));
        out.push('\n');
    }
    out
}

/// Writes the graph file and its `.idx` sibling.
pub fn save_graph(graph: &RelationGraph, path: &Path) -> Result<(), GraphError> {
    let io_err = |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(render_graph(graph).as_bytes()).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    embedding::save_index(&graph.scene_index, &graph.meta.embedder, None, &index_path(path))?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<RelationGraph, GraphError> {
    let corrupt = |message: String| GraphError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || {
        lines.next().transpose().map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let magic = next()?.unwrap_or_default();
    if magic != GRAPH_MAGIC {
        return Err(GraphError::Version {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let meta: BuildMeta = next()?
        .ok_or_else(|| corrupt("missing build metadata".into()))
        .and_then(|l| serde_json::from_str(&l).map_err(|e| corrupt(format!("build metadata: {e}"))))?;

    let mut scenes = IndexMap::new();
    while let Some(line) = next()? {
        let block: SceneBlock =
            serde_json::from_str(&line).map_err(|e| corrupt(format!("scene block: {e}")))?;
        let mut node = SceneNode::new(block.scene.clone());
        for (category, list) in [
            (ModifierCategory::Subject, block.subject),
            (ModifierCategory::Action, block.action),
            (ModifierCategory::Atmosphere, block.atmosphere),
        ] {
            for m in list {
                if m.frequency == 0 || normalize_ws(&m.text).is_empty() {
                    return Err(corrupt(format!("invalid modifier in scene {}", block.scene)));
                }
                node.add(&m.text, category, m.frequency);
            }
        }
        if scene_key(&block.scene) != block.scene {
            return Err(corrupt(format!("scene label {:?} is not normalized", block.scene)));
        }
        if scenes.insert(block.scene.clone(), node).is_some() {
            return Err(corrupt(format!("duplicate scene {}", block.scene)));
        }
    }

    let (_, scene_index) = embedding::load_index(&index_path(path))?;
    let graph = RelationGraph {
        scenes,
        scene_index,
        meta,
    };
    if !graph.check_bijection() {
        return Err(corrupt("scene index does not match scene list".into()));
    }
    Ok(graph)
}
