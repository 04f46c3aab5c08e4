//! Chat-completion dispatch with bounded parallelism, retries and
//! record/replay.
//!
//! Requests use the OpenAI-compatible body
//! `{model, messages:[{role, content}], temperature, max_tokens}` and read
//! `choices[0].message.content` from the reply. Only text is ever sent.

use std::collections::HashMap;
use std::future::Future;
use std::path::Path;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use crate::jsonl::{self, LoadError};
use crate::prompt::{ChatMessage, PromptRecord};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("API key variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("http client: {0}")]
    Client(String),
    #[error(transparent)]
    Capture(#[from] LoadError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Full URL of the chat-completions route.
    pub endpoint_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    /// Retries after the first attempt for transient failures.
    pub retry_limit: u32,
    pub timeout_ms: u64,
    /// First backoff delay; doubles after every retry.
    pub backoff_ms: u64,
    /// Permits a non-zero temperature.
    pub allow_sampling: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_name: "default".into(),
            api_key_env: "RECWRAP_API_KEY".into(),
            temperature: 0.0,
            max_tokens: 8,
            max_in_flight: 8,
            retry_limit: 3,
            timeout_ms: 60_000,
            backoff_ms: 500,
            allow_sampling: false,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".into());
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.temperature != 0.0 && !self.allow_sampling {
            return bad(format!(
                "temperature {} requires allow_sampling; evaluation runs decode greedily",
                self.temperature
            ));
        }
        match reqwest::Url::parse(&self.endpoint_url) {
            Ok(u) if matches!(u.scheme(), "http" | "https") => {}
            _ => return bad(format!("endpoint_url `{}` is not an http(s) URL", self.endpoint_url)),
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn for_prompt(prompt: &PromptRecord, config: &GatewayConfig) -> Self {
        Self {
            model: config.model_name.clone(),
            messages: prompt.messages(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        }
    }

    /// SHA-256 of the serialized body, hex encoded. Keys captured responses.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("request serialization is infallible");
        hex::encode(Sha256::digest(&body))
    }
}

/// Outcome of one prompt. `raw_text` is empty iff `error` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub sample_id: String,
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    Transient(String),
    Permanent(String),
}

impl TransportError {
    fn message(&self) -> &str {
        match self {
            TransportError::Transient(m) | TransportError::Permanent(m) => m,
        }
    }
}

/// Sends one chat request and returns the completion text.
pub trait ChatTransport: Send + Sync {
    fn send(
        &self,
        request: &ChatRequest,
    ) -> impl Future<Output = Result<String, TransportError>> + Send;
}

/// The real endpoint, reached over HTTP with a bearer token.
pub struct HttpTransport {
    client: reqwest::Client,
    url: String,
    api_key: String,
}

impl HttpTransport {
    /// Reads the API key from the configured environment variable; fails
    /// before any request is made when it is absent or empty.
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::MissingApiKey(config.api_key_env.clone()))?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: &GatewayConfig, api_key: String) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| GatewayError::Client(e.to_string()))?;
        Ok(Self {
            client,
            url: config.endpoint_url.clone(),
            api_key,
        })
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatTransport for HttpTransport {
    async fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .await
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("http status {status}")));
        }
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(TransportError::Permanent(format!("http status {status}: {body}")));
        }
        let body: CompletionBody = resp
            .json()
            .await
            .map_err(|e| TransportError::Permanent(format!("malformed completion body: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Permanent("completion has no message content".into()))
    }
}

pub struct Gateway<T> {
    config: GatewayConfig,
    transport: T,
}

impl<T: ChatTransport> Gateway<T> {
    pub fn new(config: GatewayConfig, transport: T) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self { config, transport })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// One response per prompt, aligned with the input. At most
    /// `max_in_flight` requests run at once; failures become error records.
    pub async fn complete_batch(&self, prompts: &[PromptRecord]) -> Vec<LlmResponse> {
        stream::iter(prompts.iter().map(|p| self.complete_one(p)))
            .buffered(self.config.max_in_flight)
            .collect()
            .await
    }

    async fn complete_one(&self, prompt: &PromptRecord) -> LlmResponse {
        let request = ChatRequest::for_prompt(prompt, &self.config);
        let started = Instant::now();
        let mut attempt = 0u32;
        let outcome = loop {
            attempt += 1;
            let result =
                match tokio::time::timeout(self.config.timeout(), self.transport.send(&request))
                    .await
                {
                    Ok(r) => r,
                    Err(_) => Err(TransportError::Transient("request timed out".into())),
                };
            match result {
                Ok(text) => break Ok(text),
                Err(TransportError::Transient(m)) if attempt <= self.config.retry_limit => {
                    let delay = self
                        .config
                        .backoff_ms
                        .saturating_mul(1u64 << (attempt - 1).min(16));
                    debug!(sample_id = %prompt.sample_id, attempt, "transient failure: {m}; retrying in {delay}ms");
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                }
                Err(e) => break Err(e),
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        match outcome {
            Ok(raw_text) => LlmResponse {
                sample_id: prompt.sample_id.clone(),
                raw_text,
                latency_ms,
                attempt_count: attempt,
                error: None,
            },
            Err(e) => {
                warn!(sample_id = %prompt.sample_id, attempt, "request failed: {}", e.message());
                LlmResponse {
                    sample_id: prompt.sample_id.clone(),
                    raw_text: String::new(),
                    latency_ms,
                    attempt_count: attempt,
                    error: Some(e.message().to_string()),
                }
            }
        }
    }
}

/// One line of a capture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureEntry {
    pub sample_id: String,
    pub request_hash: String,
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn capture_entries(
    prompts: &[PromptRecord],
    responses: &[LlmResponse],
    config: &GatewayConfig,
) -> Vec<CaptureEntry> {
    prompts
        .iter()
        .zip(responses)
        .map(|(p, r)| CaptureEntry {
            sample_id: r.sample_id.clone(),
            request_hash: ChatRequest::for_prompt(p, config).hash(),
            raw_text: r.raw_text.clone(),
            latency_ms: r.latency_ms,
            attempts: r.attempt_count,
            error: r.error.clone(),
        })
        .collect()
}

pub fn write_capture(path: &Path, entries: &[CaptureEntry]) -> std::io::Result<()> {
    jsonl::write_jsonl(path, entries)
}

/// Captured responses keyed by request hash.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    by_hash: HashMap<String, CaptureEntry>,
}

impl Capture {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let entries: Vec<CaptureEntry> = jsonl::read_jsonl(path)?;
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = CaptureEntry>) -> Self {
        Self {
            by_hash: entries
                .into_iter()
                .map(|e| (e.request_hash.clone(), e))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }

    /// Replays captured responses without touching the network. A prompt
    /// whose request is not in the capture yields an error record.
    pub fn replay_batch(&self, prompts: &[PromptRecord], config: &GatewayConfig) -> Vec<LlmResponse> {
        prompts
            .iter()
            .map(|p| {
                let hash = ChatRequest::for_prompt(p, config).hash();
                match self.by_hash.get(&hash) {
                    Some(e) => LlmResponse {
                        sample_id: p.sample_id.clone(),
                        raw_text: e.raw_text.clone(),
                        latency_ms: e.latency_ms,
                        attempt_count: e.attempts,
                        error: e.error.clone(),
                    },
                    None => LlmResponse {
                        sample_id: p.sample_id.clone(),
                        raw_text: String::new(),
                        latency_ms: 0,
                        attempt_count: 0,
                        error: Some(format!("request {hash} not found in capture")),
                    },
                }
            })
            .collect()
    }
}
