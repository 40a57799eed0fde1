//! Client layer for OpenAI-compatible chat-completion services with vision
//! input: bounded-concurrency fan-out, retries with jittered exponential
//! backoff, and per-endpoint rate limiting.
//!
//! Wire protocol: HTTP POST `{base-url}/chat/completions` with the standard
//! chat-completions JSON body; images travel inline as base64 data URLs so
//! the pipeline works against air-gapped local servers; auth is
//! `Authorization: Bearer <key>` with the key read from the environment
//! variable named in the endpoint config.

mod limiter;

pub use limiter::TokenBucket;

use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::sync::Semaphore;
use url::Url;

/// One inference service. `id` must be unique within a pipeline config;
/// all concurrency and rate bounds apply per endpoint id, globally across
/// overlapping calls.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub id: String,
    pub base_url: Url,
    pub model_name: String,
    /// Name of the environment variable holding the API key. Absent means
    /// the service needs no auth header (local deployments).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "defaults::max_in_flight")]
    pub max_in_flight: usize,
    /// Sustained request budget; absent means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
    #[serde(default = "defaults::timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::retry_backoff_base_ms")]
    pub retry_backoff_base_ms: u64,
    /// Decoding defaults applied to requests built for this endpoint.
    #[serde(default = "defaults::temperature")]
    pub temperature: f32,
    #[serde(default = "defaults::seed", skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(default = "defaults::max_output_tokens")]
    pub max_output_tokens: u32,
}

mod defaults {
    pub fn max_in_flight() -> usize {
        4
    }
    pub fn timeout_secs() -> f64 {
        120.0
    }
    pub fn max_retries() -> u32 {
        3
    }
    pub fn retry_backoff_base_ms() -> u64 {
        250
    }
    pub fn temperature() -> f32 {
        0.2
    }
    pub fn seed() -> Option<i64> {
        Some(0)
    }
    pub fn max_output_tokens() -> u32 {
        1024
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), EndpointError> {
        let fail = |reason: String| Err(EndpointError::InvalidConfig(reason));
        if self.id.trim().is_empty() {
            return fail("endpoint id is empty".into());
        }
        if self.max_in_flight < 1 {
            return fail(format!("endpoint {}: max_in_flight must be >= 1", self.id));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return fail(format!("endpoint {}: timeout must be > 0", self.id));
        }
        if self.requests_per_minute == Some(0) {
            return fail(format!(
                "endpoint {}: requests_per_minute must be >= 1 or omitted",
                self.id
            ));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn retry_backoff_base(&self) -> Duration {
        Duration::from_millis(self.retry_backoff_base_ms)
    }
}

/// Inline image payload; bytes are raw (encoding to base64 happens at the
/// wire).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImagePart {
    pub data: Vec<u8>,
    pub media_type: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserTurn {
    pub text_parts: Vec<String>,
    pub image_parts: Vec<ImagePart>,
}

/// A chat-completion request. Build with [`ChatRequest::new`] to pick up
/// the endpoint's decoding defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: Option<String>,
    pub user_turns: Vec<UserTurn>,
    pub temperature: f32,
    pub max_output_tokens: u32,
    pub seed: Option<i64>,
}

impl ChatRequest {
    pub fn new(endpoint: &EndpointConfig) -> ChatRequest {
        ChatRequest {
            system_prompt: None,
            user_turns: Vec::new(),
            temperature: endpoint.temperature,
            max_output_tokens: endpoint.max_output_tokens,
            seed: endpoint.seed,
        }
    }

    pub fn system(mut self, text: impl Into<String>) -> ChatRequest {
        self.system_prompt = Some(text.into());
        self
    }

    /// Appends a user turn containing only text.
    pub fn user_text(mut self, text: impl Into<String>) -> ChatRequest {
        self.user_turns.push(UserTurn {
            text_parts: vec![text.into()],
            image_parts: Vec::new(),
        });
        self
    }

    /// Appends a user turn carrying text plus one inline image.
    pub fn user_text_image(
        mut self,
        text: impl Into<String>,
        data: Vec<u8>,
        media_type: impl Into<String>,
    ) -> ChatRequest {
        self.user_turns.push(UserTurn {
            text_parts: vec![text.into()],
            image_parts: vec![ImagePart {
                data,
                media_type: media_type.into(),
            }],
        });
        self
    }

    pub fn validate(&self) -> Result<(), EndpointError> {
        if self.user_turns.is_empty() {
            return Err(EndpointError::InvalidRequest(
                "request has no user turns".into(),
            ));
        }
        for turn in &self.user_turns {
            if turn.image_parts.iter().any(|p| p.data.is_empty()) {
                return Err(EndpointError::InvalidRequest(
                    "request contains an empty image part".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Clone, Debug)]
pub struct ChatResponse {
    pub endpoint_id: String,
    pub text: String,
    pub latency: Duration,
    /// HTTP attempts performed for this logical request; always within
    /// max_retries + 1.
    pub attempt_count: u32,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, thiserror::Error)]
pub enum EndpointError {
    #[error("endpoint {endpoint}: API key environment variable {env_var} is not set")]
    AuthMissing { endpoint: String, env_var: String },
    #[error("endpoint {endpoint}: retries exhausted after {attempts} attempts; last cause: {last_cause}")]
    ExhaustedRetries {
        endpoint: String,
        attempts: u32,
        last_cause: String,
    },
    #[error("endpoint {endpoint}: non-retryable failure: {reason}")]
    NonRetryable { endpoint: String, reason: String },
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
}

// ── Wire format ──────────────────────────────────────────────────────────

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage>,
    temperature: f32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum WireContent {
    Text(String),
    Parts(Vec<serde_json::Value>),
}

#[derive(Serialize)]
struct WireMessage {
    role: &'static str,
    content: WireContent,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

fn wire_messages(request: &ChatRequest) -> Vec<WireMessage> {
    let mut messages = Vec::new();
    if let Some(system) = &request.system_prompt {
        messages.push(WireMessage {
            role: "system",
            content: WireContent::Text(system.clone()),
        });
    }
    for turn in &request.user_turns {
        let mut parts = Vec::new();
        for text in &turn.text_parts {
            parts.push(serde_json::json!({ "type": "text", "text": text }));
        }
        for image in &turn.image_parts {
            let encoded = base64::engine::general_purpose::STANDARD.encode(&image.data);
            parts.push(serde_json::json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{};base64,{}", image.media_type, encoded) },
            }));
        }
        messages.push(WireMessage {
            role: "user",
            content: WireContent::Parts(parts),
        });
    }
    messages
}

fn completions_url(base_url: &Url) -> String {
    format!(
        "{}/chat/completions",
        base_url.as_str().trim_end_matches('/')
    )
}

// ── Client ───────────────────────────────────────────────────────────────

struct EndpointState {
    semaphore: Arc<Semaphore>,
    bucket: Option<TokenBucket>,
}

/// Shared HTTP client. Admission bounds and rate limits are keyed by
/// endpoint id and enforced globally across all concurrent callers, so
/// overlapping fan-outs never exceed one endpoint's budget.
pub struct ChatClient {
    http: reqwest::Client,
    states: Mutex<HashMap<String, Arc<EndpointState>>>,
}

impl Default for ChatClient {
    fn default() -> ChatClient {
        ChatClient::new()
    }
}

impl ChatClient {
    pub fn new() -> ChatClient {
        ChatClient {
            http: reqwest::Client::new(),
            states: Mutex::new(HashMap::new()),
        }
    }

    /// Used by the pipeline to fetch tile bytes from http(s) URIs.
    pub(crate) fn http(&self) -> &reqwest::Client {
        &self.http
    }

    fn state_for(&self, endpoint: &EndpointConfig) -> Arc<EndpointState> {
        let mut states = self.states.lock().expect("endpoint state lock");
        states
            .entry(endpoint.id.clone())
            .or_insert_with(|| {
                Arc::new(EndpointState {
                    semaphore: Arc::new(Semaphore::new(endpoint.max_in_flight)),
                    bucket: endpoint
                        .requests_per_minute
                        .map(|rpm| TokenBucket::new(rpm, endpoint.max_in_flight)),
                })
            })
            .clone()
    }

    /// Sends one chat completion, retrying timeouts, connection failures,
    /// and HTTP 429/5xx with exponential backoff (base × 2^attempt, full
    /// jitter, capped at 60 s). Other 4xx statuses and malformed response
    /// bodies fail immediately.
    pub async fn send_chat(
        &self,
        endpoint: &EndpointConfig,
        request: ChatRequest,
    ) -> Result<ChatResponse, EndpointError> {
        endpoint.validate()?;
        request.validate()?;

        let auth_key = match &endpoint.api_key_env {
            Some(env_var) => {
                Some(
                    std::env::var(env_var).map_err(|_| EndpointError::AuthMissing {
                        endpoint: endpoint.id.clone(),
                        env_var: env_var.clone(),
                    })?,
                )
            }
            None => None,
        };

        let url = completions_url(&endpoint.base_url);
        let body = WireRequest {
            model: &endpoint.model_name,
            messages: wire_messages(&request),
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
            seed: request.seed,
        };

        let state = self.state_for(endpoint);
        let _permit = state
            .semaphore
            .acquire()
            .await
            .expect("endpoint semaphore closed");

        let started = tokio::time::Instant::now();
        let max_attempts = endpoint.max_retries + 1;
        let mut last_cause = String::new();

        for attempt in 0..max_attempts {
            if attempt > 0 {
                tokio::time::sleep(backoff_delay(endpoint.retry_backoff_base(), attempt - 1))
                    .await;
            }
            if let Some(bucket) = &state.bucket {
                bucket.acquire().await;
            }

            let result = self
                .http
                .post(&url)
                .timeout(endpoint.timeout())
                .header("Content-Type", "application/json")
                .json(&body);
            let result = match &auth_key {
                Some(key) => result.bearer_auth(key),
                None => result,
            };

            match result.send().await {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let parsed: WireResponse = response.json().await.map_err(|err| {
                            EndpointError::NonRetryable {
                                endpoint: endpoint.id.clone(),
                                reason: format!("malformed response body: {err}"),
                            }
                        })?;
                        let text = parsed
                            .choices
                            .first()
                            .and_then(|c| c.message.content.clone())
                            .ok_or_else(|| EndpointError::NonRetryable {
                                endpoint: endpoint.id.clone(),
                                reason: "response has no message content".into(),
                            })?;
                        return Ok(ChatResponse {
                            endpoint_id: endpoint.id.clone(),
                            text,
                            latency: started.elapsed(),
                            attempt_count: attempt + 1,
                            usage: parsed.usage,
                        });
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_cause = format!("HTTP {}", status.as_u16());
                        tracing::debug!(
                            endpoint = %endpoint.id,
                            attempt = attempt + 1,
                            status = status.as_u16(),
                            "retryable http status"
                        );
                        continue;
                    }
                    let body_snippet = response.text().await.unwrap_or_default();
                    return Err(EndpointError::NonRetryable {
                        endpoint: endpoint.id.clone(),
                        reason: format!(
                            "HTTP {}: {}",
                            status.as_u16(),
                            body_snippet.chars().take(200).collect::<String>()
                        ),
                    });
                }
                Err(err) => {
                    // Transport-level failures (timeout, refused connection,
                    // reset mid-body) are all retryable. reqwest buries the
                    // interesting part in the source chain, so surface it.
                    last_cause = if err.is_timeout() {
                        format!("timed out after {:.1}s: {err}", endpoint.timeout_secs)
                    } else {
                        let detail = std::error::Error::source(&err)
                            .map(|cause| format!(" ({cause})"))
                            .unwrap_or_default();
                        format!("transport error: {err}{detail}")
                    };
                    tracing::debug!(
                        endpoint = %endpoint.id,
                        attempt = attempt + 1,
                        error = %err,
                        "retryable transport error"
                    );
                    continue;
                }
            }
        }

        Err(EndpointError::ExhaustedRetries {
            endpoint: endpoint.id.clone(),
            attempts: max_attempts,
            last_cause,
        })
    }
}

/// Exponential backoff with full jitter: uniform in [0, base × 2^attempt],
/// capped at 60 s.
fn backoff_delay(base: Duration, attempt: u32) -> Duration {
    use rand::Rng;
    let cap = Duration::from_secs(60);
    let ceiling = base
        .checked_mul(2u32.saturating_pow(attempt))
        .unwrap_or(cap)
        .min(cap);
    rand::rng().random_range(Duration::ZERO..=ceiling)
}

/// Queries every endpoint concurrently with a per-endpoint request and
/// returns one slot per endpoint in input order, regardless of completion
/// order. A failing endpoint yields an error slot and never aborts its
/// siblings.
pub async fn fan_out<F>(
    client: &ChatClient,
    endpoints: &[EndpointConfig],
    build_request: F,
) -> Vec<(String, Result<ChatResponse, EndpointError>)>
where
    F: Fn(&EndpointConfig) -> ChatRequest,
{
    let queries = endpoints.iter().map(|endpoint| {
        let request = build_request(endpoint);
        async move { (endpoint.id.clone(), client.send_chat(endpoint, request).await) }
    });
    futures::future::join_all(queries).await
}
