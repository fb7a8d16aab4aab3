//! Contracts for every external model the pipeline talks to, plus the
//! deterministic mocks that define offline behavior.
//!
//! Roles: chat LLMs (merge, extraction, refactor, discriminator, rewriter),
//! a text-to-video generator, a vision-language misalignment assessor, scalar
//! verifiers and optional task-specific assessors.

pub mod http;
pub mod instrument;
pub mod mock;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use instrument::{CallEntry, CallRecorder, Instrumented};
pub use mock::{
    AlignmentVerifier, ConcisionVerifier, MockLlm, MockT2v, MockVlm, MotionProxyAssessor,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("{provider}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("{provider}: bad response: {message}")]
    Response { provider: String, message: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{provider}: generation failed for {prompt_id}: {message}")]
    Generation {
        provider: String,
        prompt_id: String,
        message: String,
    },
}

impl ProviderError {
    /// Only transport-class failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport { .. })
    }

    pub fn transport(provider: &str, message: impl Into<String>) -> Self {
        ProviderError::Transport {
            provider: provider.to_string(),
            attempts: 1,
            message: message.into(),
        }
    }

    pub fn response(provider: &str, message: impl Into<String>) -> Self {
        ProviderError::Response {
            provider: provider.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(user: impl Into<String>) -> Self {
        Self {
            system: crate::templates::SYSTEM_ROLE.to_string(),
            user: user.into(),
            temperature: 0.0,
            seed: None,
            max_tokens: 512,
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.user.trim().is_empty() {
            return Err(ProviderError::Precondition("chat request has empty user message".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::Precondition("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A generated video. Mock videos carry a content descriptor instead of media.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub id: String,
    pub descriptor: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    /// Whitespace token count of the prompt that produced the video.
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MisalignmentReport {
    pub missing_elements: Vec<String>,
    pub contradictions: Vec<String>,
    pub free_text: String,
}

impl MisalignmentReport {
    pub fn new(missing: Vec<String>, contradictions: Vec<String>, free_text: String) -> Self {
        Self {
            missing_elements: dedup(missing),
            contradictions: dedup(contradictions),
            free_text,
        }
    }

    pub fn is_aligned(&self) -> bool {
        self.missing_elements.is_empty() && self.contradictions.is_empty()
    }
}

fn dedup(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.into_iter().filter(|i| seen.insert(i.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub verifier_name: String,
    pub value: f64,
}

impl VerifierScore {
    /// Clamps into [0, 1]; NaN is rejected.
    pub fn new(name: impl Into<String>, value: f64) -> Result<Self, ProviderError> {
        let verifier_name = name.into();
        if value.is_nan() {
            return Err(ProviderError::response(&verifier_name, "score is NaN"));
        }
        Ok(Self {
            verifier_name,
            value: value.clamp(0.0, 1.0),
        })
    }
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError>;
}

pub trait T2vProvider: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str, seed: Option<u64>) -> Result<VideoRef, ProviderError>;
}

pub trait VlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn assess(&self, user_prompt: &str, video: &VideoRef) -> Result<MisalignmentReport, ProviderError>;
}

pub trait Verifier: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, video: &VideoRef, user_prompt: &str) -> Result<f64, ProviderError>;
}

pub trait TaskAssessor: Send + Sync {
    fn name(&self) -> &str;
    fn assess(&self, video: &VideoRef) -> Result<f64, ProviderError>;
}

/// Sends a validated chat request; whitespace around the reply is trimmed.
pub fn chat(req: &ChatRequest, provider: &dyn LlmProvider) -> Result<String, ProviderError> {
    req.validate()?;
    Ok(provider.chat(req)?.trim().to_string())
}

pub fn generate_video(prompt: &str, seed: Option<u64>, t2v: &dyn T2vProvider) -> Result<VideoRef, ProviderError> {
    if prompt.trim().is_empty() {
        return Err(ProviderError::Precondition("cannot generate from an empty prompt".into()));
    }
    t2v.generate(prompt, seed)
}

pub fn assess_misalignment(
    user_prompt: &str,
    video: &VideoRef,
    vlm: &dyn VlmProvider,
) -> Result<MisalignmentReport, ProviderError> {
    if user_prompt.trim().is_empty() {
        return Err(ProviderError::Precondition("user prompt is empty".into()));
    }
    let r = vlm.assess(user_prompt, video)?;
    Ok(MisalignmentReport::new(r.missing_elements, r.contradictions, r.free_text))
}

/// One score per verifier, in verifier order. At least one verifier is required.
pub fn verify(
    video: &VideoRef,
    user_prompt: &str,
    verifiers: &[Arc<dyn Verifier>],
) -> Result<Vec<VerifierScore>, ProviderError> {
    if verifiers.is_empty() {
        return Err(ProviderError::Precondition("at least one verifier is required".into()));
    }
    verifiers
        .iter()
        .map(|v| VerifierScore::new(v.name(), v.score(video, user_prompt)?))
        .collect()
}

pub fn task_assess(video: &VideoRef, plugin: &dyn TaskAssessor) -> Result<VerifierScore, ProviderError> {
    VerifierScore::new(plugin.name(), plugin.assess(video)?)
}

/// Retry schedule for transport-class failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Sleep before attempt `attempt + 1`, given `attempt` failures so far.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    /// Returns the outcome and the number of attempts made.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> (Result<T, ProviderError>, u32) {
        let max = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return (Ok(v), attempt),
                Err(e) if e.is_retryable() && attempt < max => {
                    tracing::debug!(attempt, error = %e, "retrying provider call");
                    std::thread::sleep(self.delay_after(attempt));
                }
                Err(ProviderError::Transport {
                    provider, message, ..
                }) => {
                    return (
                        Err(ProviderError::Transport {
                            provider,
                            attempts: attempt,
                            message,
                        }),
                        attempt,
                    )
                }
                Err(e) => return (Err(e), attempt),
            }
        }
    }
}

/// Every provider handle one pipeline run needs, by role.
#[derive(Clone)]
pub struct ProviderSet {
    pub llm: Arc<dyn LlmProvider>,
    pub llm_refactor: Arc<dyn LlmProvider>,
    pub llm_discriminator: Arc<dyn LlmProvider>,
    pub llm_rewriter: Arc<dyn LlmProvider>,
    pub embedder: Arc<dyn crate::embedding::Embedder>,
    pub t2v: Arc<dyn T2vProvider>,
    pub vlm: Arc<dyn VlmProvider>,
    pub verifiers: Vec<Arc<dyn Verifier>>,
    pub task_assessor: Option<Arc<dyn TaskAssessor>>,
}

impl ProviderSet {
    /// The all-mock stack with the default two-verifier suite and no task assessor.
    pub fn mock() -> Self {
        let llm: Arc<dyn LlmProvider> = Arc::new(MockLlm::default());
        Self {
            llm: llm.clone(),
            llm_refactor: llm.clone(),
            llm_discriminator: llm.clone(),
            llm_rewriter: llm,
            embedder: Arc::new(crate::embedding::CachedEmbedder::new(
                crate::embedding::HashEmbedder::default(),
            )),
            t2v: Arc::new(MockT2v::default()),
            vlm: Arc::new(MockVlm),
            verifiers: vec![Arc::new(AlignmentVerifier), Arc::new(ConcisionVerifier::default())],
            task_assessor: None,
        }
    }

    pub fn with_task_assessor(mut self, plugin: Arc<dyn TaskAssessor>) -> Self {
        self.task_assessor = Some(plugin);
        self
    }

    /// Wraps every model role (not the embedder) with retry and call logging.
    pub fn instrumented(&self, recorder: &CallRecorder, policy: RetryPolicy) -> Self {
        let wrap_llm = |role: &str, p: &Arc<dyn LlmProvider>| -> Arc<dyn LlmProvider> {
            Arc::new(Instrumented::new(p.clone(), role, recorder.clone(), policy))
        };
        Self {
            llm: wrap_llm("llm", &self.llm),
            llm_refactor: wrap_llm("llm_refactor", &self.llm_refactor),
            llm_discriminator: wrap_llm("llm_discriminator", &self.llm_discriminator),
            llm_rewriter: wrap_llm("llm_rewriter", &self.llm_rewriter),
            embedder: self.embedder.clone(),
            t2v: Arc::new(Instrumented::new(self.t2v.clone(), "t2v", recorder.clone(), policy)),
            vlm: Arc::new(Instrumented::new(self.vlm.clone(), "vlm", recorder.clone(), policy)),
            verifiers: self
                .verifiers
                .iter()
                .map(|v| {
                    Arc::new(Instrumented::new(v.clone(), "verifier", recorder.clone(), policy))
                        as Arc<dyn Verifier>
                })
                .collect(),
            task_assessor: self.task_assessor.as_ref().map(|t| {
                Arc::new(Instrumented::new(t.clone(), "task_assessor", recorder.clone(), policy))
                    as Arc<dyn TaskAssessor>
            }),
        }
    }
}
