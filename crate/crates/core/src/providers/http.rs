//! Chat-completion HTTP clients for hosted LLM and VLM services.
//!
//! Request: `{model, messages: [{role, content}], temperature, seed?, max_tokens}`.
//! Response: `{choices: [{message: {content}}]}`, first choice consumed.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, LlmProvider, MisalignmentReport, ProviderError, VideoRef, VlmProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding a bearer token, if the service needs one.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Deserialize)]
struct WireContent {
    content: String,
}

pub fn wire_request(model: &str, req: &ChatRequest) -> WireRequest {
    let mut messages = Vec::new();
    if !req.system.is_empty() {
        messages.push(WireMessage {
            role: "system".into(),
            content: req.system.clone(),
        });
    }
    messages.push(WireMessage {
        role: "user".into(),
        content: req.user.clone(),
    });
    WireRequest {
        model: model.to_string(),
        messages,
        temperature: req.temperature,
        seed: req.seed,
        max_tokens: req.max_tokens,
    }
}

pub struct HttpChatProvider {
    name: String,
    config: HttpProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpChatProvider {
    pub fn new(name: impl Into<String>, config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let name = name.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::response(&name, format!("client setup: {e}")))?;
        Ok(Self {
            name,
            config,
            client,
        })
    }

    fn token(&self) -> Result<Option<String>, ProviderError> {
        match &self.config.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                ProviderError::Precondition(format!("{}: credential variable {var} is not set", self.name))
            }),
        }
    }
}

impl LlmProvider for HttpChatProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let body = wire_request(&self.config.model, req);
        let mut builder = self.client.post(&self.config.endpoint).json(&body);
        if let Some(token) = self.token()? {
            builder = builder.bearer_auth(token);
        }
        let resp = builder
            .send()
            .map_err(|e| ProviderError::transport(&self.name, e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::transport(&self.name, format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderError::response(&self.name, format!("HTTP {status}: {text}")));
        }
        let text = resp
            .text()
            .map_err(|e| ProviderError::transport(&self.name, e.to_string()))?;
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| ProviderError::response(&self.name, format!("malformed body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ProviderError::response(&self.name, "response has no choices"))
    }
}

pub const VLM_INSTRUCTION: &str = "Compare the generated video with the user prompt and list what the video fails to show. Reply with one JSON object {\"missing_elements\": [..], \"contradictions\": [..], \"free_text\": \"..\"} and nothing else.";

/// Misalignment assessment through a chat-style multimodal endpoint.
pub struct HttpVlm {
    chat: HttpChatProvider,
    seed: Option<u64>,
}

impl HttpVlm {
    pub fn new(chat: HttpChatProvider, seed: Option<u64>) -> Self {
        Self { chat, seed }
    }
}

/// Reads the first JSON object embedded in a reply.
pub fn parse_misalignment(provider: &str, reply: &str) -> Result<MisalignmentReport, ProviderError> {
    let start = reply.find('{');
    let end = reply.rfind('}');
    let (Some(s), Some(e)) = (start, end) else {
        return Err(ProviderError::response(provider, "reply has no JSON object"));
    };
    if e < s {
        return Err(ProviderError::response(provider, "reply has no JSON object"));
    }
    #[derive(Deserialize)]
    struct Raw {
        #[serde(default)]
        missing_elements: Vec<String>,
        #[serde(default)]
        contradictions: Vec<String>,
        #[serde(default)]
        free_text: String,
    }
    let raw: Raw = serde_json::from_str(&reply[s..=e])
        .map_err(|err| ProviderError::response(provider, format!("bad misalignment JSON: {err}")))?;
    Ok(MisalignmentReport::new(raw.missing_elements, raw.contradictions, raw.free_text))
}

impl VlmProvider for HttpVlm {
    fn name(&self) -> &str {
        self.chat.name()
    }

    fn assess(&self, user_prompt: &str, video: &VideoRef) -> Result<MisalignmentReport, ProviderError> {
        let uri = video
            .uri
            .as_deref()
            .ok_or_else(|| ProviderError::Precondition(format!("video {} has no media uri", video.id)))?;
        let req = ChatRequest::new(format!("{VLM_INSTRUCTION}\nUser prompt: {user_prompt}\nVideo: {uri}"))
            .with_seed(self.seed);
        let reply = self.chat.chat(&req)?;
        parse_misalignment(self.chat.name(), &reply)
    }
}
