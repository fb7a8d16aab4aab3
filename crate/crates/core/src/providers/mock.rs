//! Deterministic mock providers.
//!
//! The mock LLM recognizes each instruction template by its leading text and
//! applies a fixed rule to the slot values:
//!
//! | template | rule |
//! |----------|------|
//! | merge | append `", " + modifier` unless the modifier is already a substring |
//! | extraction | scene after the last `in a`/`in the`/`at a`/`at the`; subject before the first listed verb; action from that verb to the scene marker |
//! | refactor | normalize whitespace, truncate to 60 tokens |
//! | naive rewrite | append `" in a detailed cinematic scene"` |
//! | selection | pick the candidate sharing more content tokens with `x_i`, ties to `R` |
//! | corpus rewrite | seeded shuffle of clauses with clause punctuation dropped |
//! | feedback rewrite | append the latest round's missing elements not already present |

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    ChatRequest, LlmProvider, MisalignmentReport, ProviderError, T2vProvider, TaskAssessor,
    Verifier, VideoRef, VlmProvider,
};
use crate::embedding::fnv1a;
use crate::templates::{self as tpl};
use crate::text::{self, content_set, distinct_content_tokens, normalize_ws, MOCK_VERBS, MOTION_VERBS, SCENE_MARKERS};

/// Token budget the mock refactor rule truncates to.
pub const MOCK_REFACTOR_MAX_TOKENS: usize = 60;
/// Suffix the mock naive rewrite appends.
pub const MOCK_NAIVE_SUFFIX: &str = " in a detailed cinematic scene";
/// Content tokens a mock video can depict.
pub const MOCK_VIDEO_CAPACITY: usize = 32;
/// Token budget of the concision verifier.
pub const CONCISION_BUDGET: usize = 60;

#[derive(Debug, Clone)]
pub struct MockLlm {
    name: String,
}

impl Default for MockLlm {
    fn default() -> Self {
        Self {
            name: "mock-llm".into(),
        }
    }
}

impl MockLlm {
    pub fn named(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }

    fn fail(&self, what: &str) -> ProviderError {
        ProviderError::response(&self.name, format!("mock cannot read {what}"))
    }
}

impl LlmProvider for MockLlm {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let msg = req.user.as_str();
        if msg.starts_with(tpl::MERGE_INSTRUCTION) {
            let body = tpl::read_field(msg, tpl::LABEL_BODY).ok_or_else(|| self.fail("merge body"))?;
            let modifier = tpl::read_field(msg, tpl::LABEL_MODIFIER).ok_or_else(|| self.fail("merge modifier"))?;
            Ok(mock_merge(body, modifier))
        } else if msg.starts_with(tpl::REFACTOR_PREFIX) {
            let sentence = tpl::read_refactor_sentence(msg).ok_or_else(|| self.fail("refactor sentence"))?;
            Ok(mock_refactor(sentence))
        } else if msg.starts_with(tpl::SELECT_INSTRUCTION) {
            let read = |label| tpl::read_field(msg, label).ok_or_else(|| self.fail("selection candidates"));
            Ok(mock_select(read(tpl::LABEL_XI)?, read(tpl::LABEL_XR)?, read(tpl::LABEL_XN)?).to_string())
        } else if msg.starts_with(tpl::EXTRACT_INSTRUCTION) {
            let caption = tpl::read_field(msg, tpl::LABEL_CAPTION).ok_or_else(|| self.fail("caption"))?;
            Ok(mock_extract(caption))
        } else if msg.starts_with(tpl::NAIVE_INSTRUCTION) {
            let prompt = tpl::read_field(msg, tpl::LABEL_PROMPT).ok_or_else(|| self.fail("prompt"))?;
            Ok(mock_naive(prompt))
        } else if msg.starts_with(tpl::CORPUS_REWRITE_INSTRUCTION) {
            let caption = tpl::read_field(msg, tpl::LABEL_CAPTION).ok_or_else(|| self.fail("caption"))?;
            Ok(mock_corpus_rewrite(caption, req.seed.unwrap_or(0)))
        } else if msg.starts_with(tpl::SSPO_INSTRUCTION) {
            let history = tpl::read_history(msg).map_err(|e| ProviderError::response(&self.name, e))?;
            let current = tpl::read_field(msg, tpl::LABEL_CURRENT).ok_or_else(|| self.fail("current prompt"))?;
            let latest = history.last().map(|h| h.missing_elements.as_slice()).unwrap_or(&[]);
            Ok(mock_feedback_rewrite(current, latest))
        } else if msg.starts_with(tpl::FINETUNE_INSTRUCTION) {
            let initial = msg
                .lines()
                .find_map(|l| l.strip_prefix("Initial Prompt: "))
                .map(|s| s.strip_suffix('.').unwrap_or(s))
                .ok_or_else(|| self.fail("initial prompt"))?;
            Ok(mock_naive(initial))
        } else {
            Err(ProviderError::response(&self.name, "unrecognized instruction"))
        }
    }
}

/// Returns the same reply to every request.
#[derive(Debug, Clone)]
pub struct ScriptedLlm {
    pub reply: String,
}

impl ScriptedLlm {
    pub fn new(reply: impl Into<String>) -> Self {
        Self {
            reply: reply.into(),
        }
    }
}

impl LlmProvider for ScriptedLlm {
    fn name(&self) -> &str {
        "scripted"
    }

    fn chat(&self, _req: &ChatRequest) -> Result<String, ProviderError> {
        Ok(self.reply.clone())
    }
}

pub fn mock_merge(body: &str, modifier: &str) -> String {
    let body = normalize_ws(body);
    let modifier = normalize_ws(modifier);
    if modifier.is_empty() || body.to_lowercase().contains(&modifier.to_lowercase()) {
        body
    } else {
        format!("{body}, {modifier}")
    }
}

pub fn mock_refactor(sentence: &str) -> String {
    sentence
        .split_whitespace()
        .take(MOCK_REFACTOR_MAX_TOKENS)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn mock_naive(prompt: &str) -> String {
    format!("{}{MOCK_NAIVE_SUFFIX}", normalize_ws(prompt))
}

/// `"R"` or `"N"` by content-token overlap with `x_i`; ties choose `R`.
pub fn mock_select(x_i: &str, x_r: &str, x_n: &str) -> &'static str {
    let user = content_set(x_i);
    let overlap = |c: &str| content_set(c).intersection(&user).count();
    if overlap(x_n) > overlap(x_r) {
        "N"
    } else {
        "R"
    }
}

/// Scene, subject and action by the marker and verb-list rule, as reply lines.
pub fn mock_extract(caption: &str) -> String {
    let words = text::words(caption);
    let n = words.len();
    let marker = (0..n.saturating_sub(2))
        .rev()
        .find(|&i| SCENE_MARKERS.iter().any(|(a, b)| words[i] == *a && words[i + 1] == *b));
    let (scene, scene_start) = match marker {
        Some(i) => (words[i + 2..].join(" "), i),
        None => ("general".to_string(), n),
    };
    let verb = (0..scene_start).find(|&j| MOCK_VERBS.contains(&words[j].as_str()));
    let subject_end = verb.unwrap_or(scene_start);

    let mut reply = format!("scene: {scene}\n");
    if subject_end > 0 {
        reply.push_str(&format!("subject: {}\n", words[..subject_end].join(" ")));
    }
    if let Some(v) = verb {
        reply.push_str(&format!("action: {}\n", words[v..scene_start].join(" ")));
    }
    reply
}

/// Reorders clauses with a permutation seeded by `seed` and the caption, dropping
/// the clause punctuation. Single-clause captions have their words rotated.
pub fn mock_corpus_rewrite(caption: &str, seed: u64) -> String {
    let mut clauses: Vec<Vec<&str>> = vec![Vec::new()];
    for tok in caption.split_whitespace() {
        let stripped = tok.trim_end_matches([',', ';', '.']);
        if !stripped.is_empty() {
            clauses.last_mut().expect("non-empty").push(stripped);
        }
        if stripped.len() != tok.len() {
            clauses.push(Vec::new());
        }
    }
    clauses.retain(|c| !c.is_empty());

    if clauses.len() >= 2 {
        let original: Vec<usize> = (0..clauses.len()).collect();
        let mut order = original.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(seed, caption.as_bytes()));
        order.shuffle(&mut rng);
        if order == original {
            order.rotate_left(1);
        }
        order
            .iter()
            .map(|&i| clauses[i].join(" "))
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        let mut words = clauses.pop().unwrap_or_default();
        if words.len() >= 2 {
            words.rotate_left(1);
        }
        words.join(" ")
    }
}

/// Appends each missing element not already among the current prompt's content tokens.
pub fn mock_feedback_rewrite(current: &str, missing: &[String]) -> String {
    let mut present = content_set(current);
    let mut out = normalize_ws(current);
    for m in missing {
        let m = normalize_ws(m);
        if m.is_empty() {
            continue;
        }
        let tokens = content_set(&m);
        if !tokens.is_empty() && tokens.is_subset(&present) {
            continue;
        }
        out.push_str(", ");
        out.push_str(&m);
        present.extend(tokens);
    }
    out
}

/// Text-to-video stand-in: the "video" is the prompt's first distinct content tokens.
#[derive(Debug, Clone)]
pub struct MockT2v {
    pub capacity: usize,
}

impl Default for MockT2v {
    fn default() -> Self {
        Self {
            capacity: MOCK_VIDEO_CAPACITY,
        }
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(&Sha256::digest(prompt.as_bytes())[..8])
}

impl T2vProvider for MockT2v {
    fn name(&self) -> &str {
        "mock-t2v"
    }

    fn generate(&self, prompt: &str, _seed: Option<u64>) -> Result<VideoRef, ProviderError> {
        let id = format!("mock-{}", prompt_hash(prompt));
        let descriptor: BTreeSet<String> = distinct_content_tokens(prompt)
            .into_iter()
            .take(self.capacity)
            .collect();
        if descriptor.is_empty() {
            return Err(ProviderError::Generation {
                provider: self.name().into(),
                prompt_id: id,
                message: "prompt has no content tokens".into(),
            });
        }
        Ok(VideoRef {
            id,
            descriptor,
            uri: None,
            prompt_tokens: text::token_count(prompt),
        })
    }
}

/// Reports user-prompt content tokens absent from the video descriptor.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockVlm;

impl VlmProvider for MockVlm {
    fn name(&self) -> &str {
        "mock-vlm"
    }

    fn assess(&self, user_prompt: &str, video: &VideoRef) -> Result<MisalignmentReport, ProviderError> {
        let missing: Vec<String> = distinct_content_tokens(user_prompt)
            .into_iter()
            .filter(|t| !video.descriptor.contains(t))
            .collect();
        let free_text = if missing.is_empty() {
            "the video shows every element of the prompt".to_string()
        } else {
            format!("the video is missing: {}", missing.join(", "))
        };
        Ok(MisalignmentReport::new(missing, Vec::new(), free_text))
    }
}

/// Coverage `|P ∩ D| / |P|` of user-prompt content tokens by the descriptor.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlignmentVerifier;

impl Verifier for AlignmentVerifier {
    fn name(&self) -> &str {
        "alignment"
    }

    fn score(&self, video: &VideoRef, user_prompt: &str) -> Result<f64, ProviderError> {
        let wanted = content_set(user_prompt);
        if wanted.is_empty() {
            return Ok(1.0);
        }
        let hit = wanted.iter().filter(|t| video.descriptor.contains(*t)).count();
        Ok(hit as f64 / wanted.len() as f64)
    }
}

/// `min(1, budget / prompt tokens)`: penalizes bloated prompts.
#[derive(Debug, Clone, Copy)]
pub struct ConcisionVerifier {
    pub budget: usize,
}

impl Default for ConcisionVerifier {
    fn default() -> Self {
        Self {
            budget: CONCISION_BUDGET,
        }
    }
}

impl Verifier for ConcisionVerifier {
    fn name(&self) -> &str {
        "concision"
    }

    fn score(&self, video: &VideoRef, _user_prompt: &str) -> Result<f64, ProviderError> {
        if video.prompt_tokens == 0 {
            return Ok(1.0);
        }
        Ok((self.budget as f64 / video.prompt_tokens as f64).min(1.0))
    }
}

/// Fraction of descriptor tokens that are motion verbs.
#[derive(Debug, Clone, Copy, Default)]
pub struct MotionProxyAssessor;

impl TaskAssessor for MotionProxyAssessor {
    fn name(&self) -> &str {
        "motion-proxy"
    }

    fn assess(&self, video: &VideoRef) -> Result<f64, ProviderError> {
        if video.descriptor.is_empty() {
            return Ok(0.0);
        }
        let moving = video
            .descriptor
            .iter()
            .filter(|t| MOTION_VERBS.contains(&t.as_str()))
            .count();
        Ok(moving as f64 / video.descriptor.len() as f64)
    }
}
