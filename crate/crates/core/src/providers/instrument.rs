//! Retry and call logging around provider handles.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ChatRequest, LlmProvider, MisalignmentReport, ProviderError, RetryPolicy, T2vProvider,
    TaskAssessor, Verifier, VideoRef, VlmProvider,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallEntry {
    pub seq: u64,
    pub role: String,
    pub provider: String,
    pub request_hash: String,
    pub attempts: u32,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: f64,
}

/// Shared append-only log of provider calls.
#[derive(Debug, Clone, Default)]
pub struct CallRecorder {
    entries: Arc<Mutex<Vec<CallEntry>>>,
}

impl CallRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, mut entry: CallEntry) {
        let mut guard = self.entries.lock().expect("call log poisoned");
        entry.seq = guard.len() as u64;
        guard.push(entry);
    }

    pub fn entries(&self) -> Vec<CallEntry> {
        self.entries.lock().expect("call log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// JSON lines, one per call.
    pub fn render(&self) -> String {
        self.entries()
            .iter()
            .map(|e| serde_json::to_string(e).expect("call entry serializes") + "\n")
            .collect()
    }
}

pub fn request_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// A provider wrapped with a retry policy and a call recorder.
pub struct Instrumented<P: ?Sized> {
    inner: Arc<P>,
    role: String,
    recorder: CallRecorder,
    policy: RetryPolicy,
}

impl<P: ?Sized> Instrumented<P> {
    pub fn new(inner: Arc<P>, role: &str, recorder: CallRecorder, policy: RetryPolicy) -> Self {
        Self {
            inner,
            role: role.to_string(),
            recorder,
            policy,
        }
    }

    fn call<T>(
        &self,
        provider: &str,
        hash: String,
        op: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let start = Instant::now();
        let (result, attempts) = self.policy.run(op);
        self.recorder.push(CallEntry {
            seq: 0,
            role: self.role.clone(),
            provider: provider.to_string(),
            request_hash: hash,
            attempts,
            ok: result.is_ok(),
            error: result.as_ref().err().map(|e| e.to_string()),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        result
    }
}

impl LlmProvider for Instrumented<dyn LlmProvider> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let seed = req.seed.map(|s| s.to_string()).unwrap_or_default();
        let temp = req.temperature.to_string();
        let hash = request_hash(&[&self.role, self.inner.name(), &req.system, &req.user, &seed, &temp]);
        self.call(self.inner.name(), hash, || self.inner.chat(req))
    }
}

impl T2vProvider for Instrumented<dyn T2vProvider> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn generate(&self, prompt: &str, seed: Option<u64>) -> Result<VideoRef, ProviderError> {
        let s = seed.map(|s| s.to_string()).unwrap_or_default();
        let hash = request_hash(&[&self.role, self.inner.name(), prompt, &s]);
        self.call(self.inner.name(), hash, || self.inner.generate(prompt, seed))
    }
}

impl VlmProvider for Instrumented<dyn VlmProvider> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn assess(&self, user_prompt: &str, video: &VideoRef) -> Result<MisalignmentReport, ProviderError> {
        let hash = request_hash(&[&self.role, self.inner.name(), user_prompt, &video.id]);
        self.call(self.inner.name(), hash, || self.inner.assess(user_prompt, video))
    }
}

impl Verifier for Instrumented<dyn Verifier> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn score(&self, video: &VideoRef, user_prompt: &str) -> Result<f64, ProviderError> {
        let hash = request_hash(&[&self.role, self.inner.name(), user_prompt, &video.id]);
        self.call(self.inner.name(), hash, || self.inner.score(video, user_prompt))
    }
}

impl TaskAssessor for Instrumented<dyn TaskAssessor> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn assess(&self, video: &VideoRef) -> Result<f64, ProviderError> {
        let hash = request_hash(&[&self.role, self.inner.name(), &video.id]);
        self.call(self.inner.name(), hash, || self.inner.assess(video))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockLlm;

    #[test]
    fn calls_are_logged_once_with_stable_hash() {
        let rec = CallRecorder::new();
        let inner: Arc<dyn LlmProvider> = Arc::new(MockLlm::default());
        let llm = Instrumented::new(inner, "llm", rec.clone(), RetryPolicy::no_delay(3));
        let req = ChatRequest::new(crate::templates::render_naive("a cat"));
        llm.chat(&req).unwrap();
        llm.chat(&req).unwrap();
        llm.chat(&ChatRequest::new("gibberish")).unwrap_err();
        let entries = rec.entries();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].request_hash, entries[1].request_hash);
        assert_ne!(entries[0].request_hash, entries[2].request_hash);
        assert_eq!(entries.iter().map(|e| e.seq).collect::<Vec<_>>(), [0, 1, 2]);
        assert!(!entries[2].ok && entries[2].attempts == 1);
    }

    #[test]
    fn hash_is_length_prefixed() {
        assert_ne!(request_hash(&["ab", "c"]), request_hash(&["a", "bc"]));
    }
}
