//! Stage 1: word augmentation by iterative retrieve-and-merge, sentence
//! refactoring, a naive rewrite branch, and discriminator selection between
//! the refactored and naive candidates. Also builds the instruction-tuning
//! datasets for the refactoring and discriminator models.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PromptRecord};
use crate::embedding::Embedder;
use crate::export::InstructionRecord;
use crate::graph::{self, GraphError, ModifierNode, RelationGraph};
use crate::providers::{chat, ChatRequest, LlmProvider, ProviderError, ProviderSet};
use crate::templates::{self, MergeExample};
use crate::text::normalize_ws;

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("{op} expects a {expected} candidate, got {found}")]
    Branch {
        op: &'static str,
        expected: String,
        found: Branch,
    },
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] GraphError),
    #[error("merge step {step} failed: {message}")]
    Merge { step: usize, message: String },
    #[error("{0} returned an empty reply")]
    EmptyReply(&'static str),
    #[error("empty input prompt")]
    EmptyInput,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("discriminator reply is neither R nor N: {0:?}")]
    SelectionParse(String),
    #[error("unlabeled selection examples: {}", .0.join(", "))]
    Unlabeled(Vec<String>),
    #[error("labels disagree with metric scores: {}", .0.join(", "))]
    LabelConflict(Vec<String>),
    #[error("example {id} metric_scores lacks key {key}")]
    MissingScore { id: String, key: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    User,
    Augmented,
    Refactored,
    Naive,
    SspoIter(u32),
    Selected,
}

impl Branch {
    pub fn tag(self) -> String {
        match self {
            Branch::User => "user".into(),
            Branch::Augmented => "augmented".into(),
            Branch::Refactored => "refactored".into(),
            Branch::Naive => "naive".into(),
            Branch::SspoIter(t) => format!("sspo-{t}"),
            Branch::Selected => "selected".into(),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub id: String,
    pub text: String,
    pub branch: Branch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub sample_id: String,
}

impl CandidatePrompt {
    pub fn user(sample_id: impl Into<String>, text: impl Into<String>) -> Self {
        let sample_id = sample_id.into();
        Self {
            id: format!("{sample_id}/user"),
            text: text.into(),
            branch: Branch::User,
            parent_id: None,
            sample_id,
        }
    }

    pub fn from_record(rec: &PromptRecord) -> Self {
        Self::user(rec.id.clone(), rec.text.clone())
    }

    /// A child candidate on `branch`, linked to `self`.
    pub fn derive(&self, branch: Branch, text: impl Into<String>) -> Self {
        Self {
            id: format!("{}/{}", self.sample_id, branch.tag()),
            text: text.into(),
            branch,
            parent_id: Some(self.id.clone()),
            sample_id: self.sample_id.clone(),
        }
    }
}

fn expect_branch(op: &'static str, c: &CandidatePrompt, expected: Branch) -> Result<(), RefineError> {
    if c.branch == expected {
        Ok(())
    } else {
        Err(RefineError::Branch {
            op,
            expected: expected.tag(),
            found: c.branch,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationStep {
    pub modifier: ModifierNode,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentationTrace {
    pub steps: Vec<AugmentationStep>,
}

impl AugmentationTrace {
    /// Each step starts where the previous one ended.
    pub fn is_chained(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].after == w[1].before)
    }
}

/// Settings shared by every Stage-1 call.
#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub k_scene: usize,
    pub k_mod: usize,
    pub seed: Option<u64>,
    pub merge_examples: Vec<MergeExample>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            k_scene: graph::DEFAULT_K_SCENE,
            k_mod: graph::DEFAULT_K_MOD,
            seed: None,
            merge_examples: templates::default_merge_examples(),
        }
    }
}

fn ask(llm: &dyn LlmProvider, role: &'static str, message: String, seed: Option<u64>) -> Result<String, RefineError> {
    let reply = normalize_ws(&chat(&ChatRequest::new(message).with_seed(seed), llm)?);
    if reply.is_empty() {
        return Err(RefineError::EmptyReply(role));
    }
    Ok(reply)
}

/// One merge: the LLM combines a description body with one modifier.
pub fn merge_once(
    body: &str,
    modifier: &ModifierNode,
    llm: &dyn LlmProvider,
    examples: &[MergeExample],
    seed: Option<u64>,
) -> Result<String, RefineError> {
    if body.trim().is_empty() {
        return Err(RefineError::EmptyInput);
    }
    ask(llm, "merge", templates::render_merge(examples, body, &modifier.text), seed)
}

/// Retrieves modifiers for the user prompt and folds them in one at a time,
/// strongest first.
pub fn augment(
    x0: &CandidatePrompt,
    graph: &RelationGraph,
    llm: &dyn LlmProvider,
    embedder: &dyn Embedder,
    cfg: &Stage1Config,
) -> Result<(CandidatePrompt, AugmentationTrace), RefineError> {
    expect_branch("augment", x0, Branch::User)?;
    let modifiers = if cfg.k_mod == 0 {
        Vec::new()
    } else {
        graph::retrieve_modifiers(graph, &x0.text, embedder, cfg.k_scene, cfg.k_mod)?
    };
    let mut trace = AugmentationTrace::default();
    let mut current = x0.text.clone();
    for (step, hit) in modifiers.into_iter().enumerate() {
        let after = merge_once(&current, &hit.modifier, llm, &cfg.merge_examples, cfg.seed).map_err(|e| {
            RefineError::Merge {
                step,
                message: e.to_string(),
            }
        })?;
        trace.steps.push(AugmentationStep {
            modifier: hit.modifier,
            before: std::mem::replace(&mut current, after.clone()),
            after,
        });
    }
    Ok((x0.derive(Branch::Augmented, current), trace))
}

pub fn refactor(x_w: &CandidatePrompt, llm_r: &dyn LlmProvider, seed: Option<u64>) -> Result<CandidatePrompt, RefineError> {
    expect_branch("refactor", x_w, Branch::Augmented)?;
    let text = ask(llm_r, "refactor", templates::render_refactor(&x_w.text), seed)?;
    Ok(x_w.derive(Branch::Refactored, text))
}

pub fn naive_rewrite(x_i: &CandidatePrompt, llm: &dyn LlmProvider, seed: Option<u64>) -> Result<CandidatePrompt, RefineError> {
    expect_branch("naive_rewrite", x_i, Branch::User)?;
    let text = ask(llm, "naive rewrite", templates::render_naive(&x_i.text), seed)?;
    Ok(x_i.derive(Branch::Naive, text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionLabel {
    ChooseR,
    ChooseN,
}

impl SelectionLabel {
    pub fn answer(self) -> &'static str {
        match self {
            SelectionLabel::ChooseR => "R",
            SelectionLabel::ChooseN => "N",
        }
    }
}

/// The first non-whitespace token must be exactly `R` or `N`.
pub fn parse_selection(reply: &str) -> Result<SelectionLabel, RefineError> {
    match reply.split_whitespace().next() {
        Some("R") => Ok(SelectionLabel::ChooseR),
        Some("N") => Ok(SelectionLabel::ChooseN),
        _ => Err(RefineError::SelectionParse(reply.to_string())),
    }
}

pub fn select(
    x_i: &CandidatePrompt,
    x_r: &CandidatePrompt,
    x_n: &CandidatePrompt,
    llm_d: &dyn LlmProvider,
    seed: Option<u64>,
) -> Result<CandidatePrompt, RefineError> {
    expect_branch("select", x_i, Branch::User)?;
    expect_branch("select", x_r, Branch::Refactored)?;
    expect_branch("select", x_n, Branch::Naive)?;
    let req = ChatRequest::new(templates::render_select(&x_i.text, &x_r.text, &x_n.text)).with_seed(seed);
    let chosen = match parse_selection(&chat(&req, llm_d)?)? {
        SelectionLabel::ChooseR => x_r,
        SelectionLabel::ChooseN => x_n,
    };
    Ok(chosen.derive(Branch::Selected, chosen.text.clone()))
}

/// One sample's Stage-1 output record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Result {
    pub sample_id: String,
    pub user: String,
    pub augmented: String,
    pub refactored: String,
    pub naive: String,
    pub selected_branch: Branch,
    pub selected_text: String,
    pub trace: Vec<AugmentationStep>,
}

/// Runs the full Stage-1 pipeline for one user prompt.
pub fn run_stage1(
    user: &PromptRecord,
    graph: &RelationGraph,
    providers: &ProviderSet,
    cfg: &Stage1Config,
) -> Result<Stage1Result, RefineError> {
    if user.text.trim().is_empty() {
        return Err(RefineError::EmptyInput);
    }
    let x_i = CandidatePrompt::from_record(user);
    let (x_w, trace) = augment(&x_i, graph, providers.llm.as_ref(), providers.embedder.as_ref(), cfg)?;
    let x_r = refactor(&x_w, providers.llm_refactor.as_ref(), cfg.seed)?;
    let x_n = naive_rewrite(&x_i, providers.llm.as_ref(), cfg.seed)?;
    let selected = select(&x_i, &x_r, &x_n, providers.llm_discriminator.as_ref(), cfg.seed)?;
    let selected_branch = if selected.parent_id.as_deref() == Some(x_r.id.as_str()) {
        Branch::Refactored
    } else {
        Branch::Naive
    };
    Ok(Stage1Result {
        sample_id: user.id.clone(),
        user: x_i.text,
        augmented: x_w.text,
        refactored: x_r.text,
        naive: x_n.text,
        selected_branch,
        selected_text: selected.text,
        trace: trace.steps,
    })
}

/// Simulated word-augmented prompt `w` paired with its training prompt `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefactorPair {
    pub w: String,
    pub c: String,
}

impl RefactorPair {
    pub fn to_record(&self) -> InstructionRecord {
        InstructionRecord {
            instruction: templates::render_refactor(&self.w),
            output: self.c.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RefactorDataset {
    pub pairs: Vec<RefactorPair>,
    /// Prompt ids whose rewrite was unusable, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Rewrites each training prompt to break its format while keeping its meaning.
/// Rewrites identical to the source are skipped, as are provider failures.
pub fn build_refactor_dataset(corpus: &Corpus, llm: &dyn LlmProvider, seed: Option<u64>) -> RefactorDataset {
    let mut out = RefactorDataset::default();
    if corpus.is_empty() {
        tracing::warn!(origin = %corpus.origin, "refactor dataset requested for an empty corpus");
        return out;
    }
    for rec in corpus.iter() {
        let c = normalize_ws(&rec.text);
        match ask(llm, "corpus rewrite", templates::render_corpus_rewrite(&c), seed) {
            Ok(w) if w != c => out.pairs.push(RefactorPair { w, c }),
            Ok(_) => out.skipped.push((rec.id.clone(), "rewrite equals source".into())),
            Err(e) => out.skipped.push((rec.id.clone(), e.to_string())),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionExample {
    pub id: String,
    pub x_i: String,
    pub x_r: String,
    pub x_n: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_d: Option<SelectionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<String>,
    /// Externally computed video scores keyed `x_r` and `x_n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_scores: Option<BTreeMap<String, f64>>,
}

impl SelectionExample {
    fn label_from_scores(&self) -> Result<Option<SelectionLabel>, RefineError> {
        let Some(scores) = &self.metric_scores else {
            return Ok(None);
        };
        let get = |key: &'static str| {
            scores.get(key).copied().ok_or_else(|| RefineError::MissingScore {
                id: self.id.clone(),
                key,
            })
        };
        let (r, n) = (get("x_r")?, get("x_n")?);
        Ok(Some(if n > r {
            SelectionLabel::ChooseN
        } else {
            SelectionLabel::ChooseR
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorDataset {
    pub records: Vec<InstructionRecord>,
    /// Example count per evaluation dimension; unlabeled dimensions count as `unspecified`.
    pub counts: BTreeMap<String, usize>,
}

/// Emits selection records. Every example needs a label, either given or
/// derived from `metric_scores`; when both exist they must agree.
pub fn build_discriminator_dataset(examples: &[SelectionExample]) -> Result<DiscriminatorDataset, RefineError> {
    let mut unlabeled = Vec::new();
    let mut conflicts = Vec::new();
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let derived = ex.label_from_scores()?;
        match (ex.y_d, derived) {
            (Some(given), Some(d)) if given != d => conflicts.push(ex.id.clone()),
            (Some(l), _) | (None, Some(l)) => labels.push(l),
            (None, None) => unlabeled.push(ex.id.clone()),
        }
    }
    if !unlabeled.is_empty() {
        return Err(RefineError::Unlabeled(unlabeled));
    }
    if !conflicts.is_empty() {
        return Err(RefineError::LabelConflict(conflicts));
    }
    let mut counts = BTreeMap::new();
    let records = examples
        .iter()
        .zip(labels)
        .map(|(ex, label)| {
            *counts
                .entry(ex.dimension.clone().unwrap_or_else(|| "unspecified".into()))
                .or_insert(0) += 1;
            InstructionRecord {
                instruction: templates::render_select(&ex.x_i, &ex.x_r, &ex.x_n),
                output: label.answer().to_string(),
            }
        })
        .collect();
    Ok(DiscriminatorDataset { records, counts })
}
