//! In-process mock of an OpenAI-compatible chat-completions service, for
//! integration tests. Compiled only with the `testkit` feature.
//!
//! A [`MockServer`] binds an ephemeral local port and answers
//! `POST /chat/completions` (and the `/v1`-prefixed variant) by handing a
//! decoded [`MockRequest`] to the test's script closure. The server tracks
//! total hits and the high-water mark of concurrent in-flight requests so
//! tests can assert the client's concurrency bounds.

use axum::response::IntoResponse;
use base64::Engine;
use serde::Serialize;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// What the mock saw for one request, after undoing the wire encoding.
#[derive(Clone, Debug)]
pub struct MockRequest {
    /// 0-based arrival index across all requests this server handled.
    pub hit_index: u64,
    pub model: String,
    /// All text parts of all messages, joined with newlines.
    pub text: String,
    /// Decoded bytes of every inline image, in order of appearance.
    pub images: Vec<Vec<u8>>,
    /// Raw `Authorization` header, when present.
    pub authorization: Option<String>,
}

impl MockRequest {
    /// The first image's bytes as UTF-8, for tests that encode item
    /// identity in the image payload.
    pub fn image_text(&self) -> Option<String> {
        self.images
            .first()
            .map(|bytes| String::from_utf8_lossy(bytes).into_owned())
    }
}

#[derive(Clone, Debug)]
enum MockBody {
    /// Wrapped into a standard chat-completion JSON body.
    Text(String),
    /// Sent verbatim.
    Raw(serde_json::Value),
}

/// Scripted reply for one request.
#[derive(Clone, Debug)]
pub struct MockReply {
    status: u16,
    body: MockBody,
    delay: Duration,
}

impl MockReply {
    /// 200 with the given assistant message text.
    pub fn text(content: impl Into<String>) -> MockReply {
        MockReply {
            status: 200,
            body: MockBody::Text(content.into()),
            delay: Duration::ZERO,
        }
    }

    /// An error status with a small JSON body.
    pub fn status(status: u16) -> MockReply {
        MockReply {
            status,
            body: MockBody::Raw(serde_json::json!({ "error": { "code": status } })),
            delay: Duration::ZERO,
        }
    }

    /// A literal response body with the given status.
    pub fn raw(status: u16, body: serde_json::Value) -> MockReply {
        MockReply {
            status,
            body: MockBody::Raw(body),
            delay: Duration::ZERO,
        }
    }

    /// Holds the request open for `delay` before responding; the wait
    /// counts toward the in-flight high-water mark.
    pub fn with_delay(mut self, delay: Duration) -> MockReply {
        self.delay = delay;
        self
    }
}

type Script = dyn Fn(&MockRequest) -> MockReply + Send + Sync;

struct ServerState {
    script: Box<Script>,
    hits: AtomicU64,
    in_flight: AtomicU64,
    max_in_flight: AtomicU64,
}

pub struct MockServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
}

impl MockServer {
    /// Binds 127.0.0.1 on an ephemeral port and serves until drop.
    pub async fn start<F>(script: F) -> MockServer
    where
        F: Fn(&MockRequest) -> MockReply + Send + Sync + 'static,
    {
        let state = Arc::new(ServerState {
            script: Box::new(script),
            hits: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            max_in_flight: AtomicU64::new(0),
        });
        let router = axum::Router::new()
            .route("/chat/completions", axum::routing::post(handle))
            .route("/v1/chat/completions", axum::routing::post(handle))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind mock server");
        let addr = listener.local_addr().expect("mock server addr");
        let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
        tokio::spawn(async move {
            axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                })
                .await
                .expect("mock server run");
        });
        MockServer {
            addr,
            state,
            shutdown: Some(shutdown_tx),
        }
    }

    /// Convenience: a server answering every request with the same text.
    pub async fn constant(content: impl Into<String>) -> MockServer {
        let content = content.into();
        MockServer::start(move |_| MockReply::text(content.clone())).await
    }

    /// Base URL (no trailing path); clients append `/chat/completions`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// An endpoint config pointed at this server with short timeouts and
    /// near-zero backoff, suitable for tests.
    pub fn endpoint(&self, id: &str) -> crate::endpoints::EndpointConfig {
        crate::endpoints::EndpointConfig {
            id: id.to_string(),
            base_url: url::Url::parse(&self.url()).expect("mock url parses"),
            model_name: "mock-model".to_string(),
            api_key_env: None,
            max_in_flight: 8,
            requests_per_minute: None,
            timeout_secs: 5.0,
            max_retries: 3,
            retry_backoff_base_ms: 1,
            temperature: 0.0,
            seed: Some(0),
            max_output_tokens: 256,
        }
    }

    /// Total requests handled so far.
    pub fn hits(&self) -> u64 {
        self.state.hits.load(Ordering::SeqCst)
    }

    /// High-water mark of concurrently in-flight requests.
    pub fn max_concurrent(&self) -> u64 {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(shutdown) = self.shutdown.take() {
            let _ = shutdown.send(());
        }
    }
}

#[derive(Serialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Serialize)]
struct WireMessage {
    role: &'static str,
    content: String,
}

fn decode_request(
    hit_index: u64,
    headers: &axum::http::HeaderMap,
    body: &serde_json::Value,
) -> MockRequest {
    let mut texts = Vec::new();
    let mut images = Vec::new();
    for message in body["messages"].as_array().into_iter().flatten() {
        match &message["content"] {
            serde_json::Value::String(text) => texts.push(text.clone()),
            serde_json::Value::Array(parts) => {
                for part in parts {
                    match part["type"].as_str() {
                        Some("text") => {
                            if let Some(text) = part["text"].as_str() {
                                texts.push(text.to_string());
                            }
                        }
                        Some("image_url") => {
                            if let Some(data_url) = part["image_url"]["url"].as_str() {
                                let encoded =
                                    data_url.split_once(',').map(|(_, d)| d).unwrap_or("");
                                if let Ok(bytes) =
                                    base64::engine::general_purpose::STANDARD.decode(encoded)
                                {
                                    images.push(bytes);
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    MockRequest {
        hit_index,
        model: body["model"].as_str().unwrap_or_default().to_string(),
        text: texts.join("\n"),
        images,
        authorization: headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .map(|v| v.to_string()),
    }
}

async fn handle(
    axum::extract::State(state): axum::extract::State<Arc<ServerState>>,
    headers: axum::http::HeaderMap,
    axum::extract::Json(body): axum::extract::Json<serde_json::Value>,
) -> axum::response::Response {
    let hit_index = state.hits.fetch_add(1, Ordering::SeqCst);
    let current = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(current, Ordering::SeqCst);

    let request = decode_request(hit_index, &headers, &body);
    let reply = (state.script)(&request);
    if reply.delay > Duration::ZERO {
        tokio::time::sleep(reply.delay).await;
    }
    state.in_flight.fetch_sub(1, Ordering::SeqCst);

    let status = axum::http::StatusCode::from_u16(reply.status)
        .unwrap_or(axum::http::StatusCode::INTERNAL_SERVER_ERROR);
    let body = match reply.body {
        MockBody::Text(content) => serde_json::json!({
            "choices": [WireChoice {
                message: WireMessage {
                    role: "assistant",
                    content,
                },
            }],
            "usage": { "prompt_tokens": 1, "completion_tokens": 1, "total_tokens": 2 }
        }),
        MockBody::Raw(value) => value,
    };
    (status, axum::Json(body)).into_response()
}
