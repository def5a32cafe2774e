//! OpenAI-compatible HTTP backends.
//!
//! Chat goes to `POST {base_url}/chat/completions` with `messages` whose user content mixes
//! `text` and `image_url` parts (local images are inlined as base64 `data:` URLs). Embeddings
//! go to `POST {base_url}/embeddings` with the image URL as `input` and are read back from
//! `data[0].embedding`.
//!
//! Transient failures (connection errors, timeouts, 429 and 5xx) are retried up to
//! `max_retries` times with exponential backoff; 401/403 and other 4xx statuses are returned
//! immediately.

use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{BackendConfig, BackendError, ChatBackend, ChatRequest, Embedder, ImageRef};
use crate::vector;

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportFailure {
    Timeout,
    Connect(String),
}

/// The single operation the backends need from an HTTP stack. Swappable so tests can count
/// attempts and inspect outgoing bodies.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure>;
}

/// Blocking reqwest client, created lazily on first use.
#[derive(Default)]
pub struct ReqwestTransport {
    client: OnceLock<reqwest::blocking::Client>,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(reqwest::blocking::Client::new)
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportFailure> {
        let mut req = self.client().post(url).timeout(timeout).json(body);
        if let Some(key) = bearer {
            req = req.bearer_auth(key);
        }
        let map_err = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportFailure::Timeout
            } else {
                TransportFailure::Connect(e.to_string())
            }
        };
        let resp = req.send().map_err(map_err)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(map_err)?;
        Ok(HttpReply { status, body })
    }
}

enum Attempt {
    Done(Value),
    Retry(BackendError),
    Fatal(BackendError),
}

fn classify(result: Result<HttpReply, TransportFailure>) -> Attempt {
    match result {
        Err(TransportFailure::Timeout) => Attempt::Retry(BackendError::Timeout),
        Err(TransportFailure::Connect(e)) => Attempt::Retry(BackendError::Transport(e)),
        Ok(reply) => match reply.status {
            200..=299 => match serde_json::from_str(&reply.body) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal(BackendError::InvalidResponse(e.to_string())),
            },
            401 | 403 => Attempt::Fatal(BackendError::AuthFailure(error_message(&reply.body))),
            408 => Attempt::Retry(BackendError::Timeout),
            429 | 500..=599 => Attempt::Retry(BackendError::Transport(format!(
                "status {}: {}",
                reply.status,
                error_message(&reply.body)
            ))),
            status => Attempt::Fatal(BackendError::ModelRefused {
                status,
                message: error_message(&reply.body),
            }),
        },
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("error"))
                .and_then(|m| m.as_str().map(str::to_string))
        })
        .unwrap_or_else(|| body.chars().take(200).collect())
}

fn endpoint(base_url: &str, path: &str) -> String {
    format!("{}/{}", base_url.trim_end_matches('/'), path)
}

/// Posts with retries. Makes at most `max_retries + 1` attempts.
fn post_with_retries(
    transport: &dyn HttpTransport,
    config: &BackendConfig,
    api_key: Option<&str>,
    url: &str,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut last = BackendError::Transport("no attempt made".into());
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            let delay = config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            thread::sleep(Duration::from_millis(delay));
        }
        debug!(url, attempt, "posting");
        match classify(transport.post_json(url, api_key, body, config.timeout())) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(e) => {
                warn!(url, attempt, error = %e, "transient backend failure");
                last = e;
            }
        }
    }
    Err(last)
}

/// Chat model served behind an OpenAI-compatible endpoint.
pub struct HttpChatBackend {
    config: BackendConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        Self::with_transport(config, api_key, Arc::new(ReqwestTransport::new()))
    }

    pub fn with_transport(
        config: BackendConfig,
        api_key: Option<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            config,
            api_key,
            transport,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Request body for `request`, as sent on the wire.
    pub fn request_body(&self, request: &ChatRequest) -> Result<Value, BackendError> {
        let messages = request
            .turns
            .iter()
            .map(|turn| {
                let content = if turn.images.is_empty() {
                    Value::String(turn.text.clone())
                } else {
                    let mut parts = Vec::new();
                    for image in &turn.images {
                        parts.push(json!({"type": "image_url", "image_url": {"url": image.to_url()?}}));
                    }
                    if !turn.text.is_empty() {
                        parts.push(json!({"type": "text", "text": turn.text}));
                    }
                    Value::Array(parts)
                };
                Ok(json!({"role": turn.role.as_str(), "content": content}))
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        let mut body = json!({
            "model": self.config.model_identifier(request.adapter_ref.as_deref()),
            "messages": messages,
            "temperature": self.config.temperature,
            "stream": false,
        });
        if let Some(max) = self.config.max_tokens {
            body["max_tokens"] = json!(max);
        }
        Ok(body)
    }
}

fn reply_text(v: &Value) -> Result<String, BackendError> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::InvalidResponse("missing choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(BackendError::InvalidResponse("content is not text".into())),
    };
    if text.trim().is_empty() {
        let refusal = v.pointer("/choices/0/message/refusal").and_then(Value::as_str);
        return Err(match refusal {
            Some(r) => BackendError::ModelRefused {
                status: 200,
                message: r.to_string(),
            },
            None => BackendError::InvalidResponse("empty reply".into()),
        });
    }
    Ok(text)
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        let body = self.request_body(request)?;
        let url = endpoint(&self.config.base_url, "chat/completions");
        let v = post_with_retries(
            self.transport.as_ref(),
            &self.config,
            self.api_key.as_deref(),
            &url,
            &body,
        )?;
        reply_text(&v)
    }
}

/// Image embedder behind an OpenAI-style `/embeddings` endpoint. The dimension is pinned by the
/// first successful call (or by `expected_dimension`); later replies must agree.
pub struct HttpEmbedder {
    config: BackendConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    dimension: Mutex<Option<usize>>,
}

impl HttpEmbedder {
    pub fn new(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        Self::with_transport(config, api_key, Arc::new(ReqwestTransport::new()))
    }

    pub fn with_transport(
        config: BackendConfig,
        api_key: Option<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            config,
            api_key,
            transport,
            dimension: Mutex::new(None),
        })
    }

    pub fn expecting_dimension(self, dim: usize) -> Self {
        *self.dimension.lock().unwrap() = Some(dim);
        self
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        if image.is_empty() {
            return Err(BackendError::InvalidRequest("empty image".into()));
        }
        let body = json!({
            "model": self.config.model_name,
            "input": [image.to_url()?],
        });
        let url = endpoint(&self.config.base_url, "embeddings");
        let v = post_with_retries(
            self.transport.as_ref(),
            &self.config,
            self.api_key.as_deref(),
            &url,
            &body,
        )?;
        let raw: Vec<f64> = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::InvalidResponse("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::InvalidResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        {
            let mut dim = self.dimension.lock().unwrap();
            match *dim {
                Some(expected) if expected != raw.len() => {
                    return Err(BackendError::DimensionMismatch {
                        expected,
                        actual: raw.len(),
                    })
                }
                Some(_) => {}
                None => *dim = Some(raw.len()),
            }
        }
        vector::normalized(&raw).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ChatTurn;
    use std::collections::VecDeque;

    /// Replays canned results and records every outgoing request.
    struct RecordingStub {
        replies: Mutex<VecDeque<Result<HttpReply, TransportFailure>>>,
        fallback: Result<HttpReply, TransportFailure>,
        seen: Mutex<Vec<(String, Option<String>, Value)>>,
    }

    impl RecordingStub {
        fn new(
            replies: Vec<Result<HttpReply, TransportFailure>>,
            fallback: Result<HttpReply, TransportFailure>,
        ) -> Arc<Self> {
            Arc::new(Self {
                replies: Mutex::new(replies.into()),
                fallback,
                seen: Mutex::new(Vec::new()),
            })
        }

        fn attempts(&self) -> usize {
            self.seen.lock().unwrap().len()
        }
    }

    impl HttpTransport for RecordingStub {
        fn post_json(
            &self,
            url: &str,
            bearer: Option<&str>,
            body: &Value,
            _timeout: Duration,
        ) -> Result<HttpReply, TransportFailure> {
            self.seen
                .lock()
                .unwrap()
                .push((url.to_string(), bearer.map(str::to_string), body.clone()));
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| self.fallback.clone())
        }
    }

    fn ok(body: Value) -> Result<HttpReply, TransportFailure> {
        Ok(HttpReply {
            status: 200,
            body: body.to_string(),
        })
    }

    fn chat_ok(text: &str) -> Result<HttpReply, TransportFailure> {
        ok(json!({"choices": [{"message": {"role": "assistant", "content": text}}]}))
    }

    fn config(max_retries: u32) -> BackendConfig {
        let mut c = BackendConfig::new("http://127.0.0.1:9/v1/", "qwen2.5-vl-3b");
        c.max_retries = max_retries;
        c.retry_backoff_ms = 0;
        c
    }

    fn request() -> ChatRequest {
        ChatRequest::new(vec![ChatTurn::system("sys"), ChatTurn::user("hi")])
    }

    #[test]
    fn adapter_ref_is_part_of_model_identifier() {
        let stub = RecordingStub::new(vec![chat_ok("yes")], chat_ok("yes"));
        let backend = HttpChatBackend::with_transport(config(0), Some("k".into()), stub.clone()).unwrap();
        let reply = backend.chat(&request().with_adapter("metac-3")).unwrap();
        assert_eq!(reply, "yes");
        let seen = stub.seen.lock().unwrap();
        let (url, bearer, body) = &seen[0];
        assert_eq!(url, "http://127.0.0.1:9/v1/chat/completions");
        assert_eq!(bearer.as_deref(), Some("k"));
        assert!(body["model"].as_str().unwrap().contains("metac-3"));
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "system");
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        let stub = RecordingStub::new(vec![], Err(TransportFailure::Connect("refused".into())));
        let backend = HttpChatBackend::with_transport(config(2), None, stub.clone()).unwrap();
        assert!(matches!(backend.chat(&request()), Err(BackendError::Transport(_))));
        assert_eq!(stub.attempts(), 3);
    }

    #[test]
    fn attempts_are_failures_plus_one_within_budget() {
        for failures in 0..5usize {
            for max_retries in 0..4u32 {
                let replies = (0..failures)
                    .map(|_| Ok(HttpReply { status: 503, body: "busy".into() }))
                    .collect();
                let stub = RecordingStub::new(replies, chat_ok("fine"));
                let backend =
                    HttpChatBackend::with_transport(config(max_retries), None, stub.clone()).unwrap();
                let result = backend.chat(&request());
                assert_eq!(stub.attempts(), failures.min(max_retries as usize) + 1);
                assert_eq!(result.is_ok(), failures <= max_retries as usize);
            }
        }
    }

    #[test]
    fn timeout_after_retries() {
        let stub = RecordingStub::new(vec![], Err(TransportFailure::Timeout));
        let backend = HttpChatBackend::with_transport(config(1), None, stub.clone()).unwrap();
        assert_eq!(backend.chat(&request()), Err(BackendError::Timeout));
        assert_eq!(stub.attempts(), 2);
    }

    #[test]
    fn auth_and_refusal_are_not_retried() {
        let stub = RecordingStub::new(
            vec![],
            Ok(HttpReply {
                status: 401,
                body: json!({"error": {"message": "bad key"}}).to_string(),
            }),
        );
        let backend = HttpChatBackend::with_transport(config(3), None, stub.clone()).unwrap();
        assert_eq!(backend.chat(&request()), Err(BackendError::AuthFailure("bad key".into())));
        assert_eq!(stub.attempts(), 1);

        let stub = RecordingStub::new(vec![], Ok(HttpReply { status: 400, body: "nope".into() }));
        let backend = HttpChatBackend::with_transport(config(3), None, stub.clone()).unwrap();
        assert!(matches!(
            backend.chat(&request()),
            Err(BackendError::ModelRefused { status: 400, .. })
        ));
        assert_eq!(stub.attempts(), 1);
    }

    #[test]
    fn images_are_sent_as_data_urls() {
        let stub = RecordingStub::new(vec![], chat_ok("ok"));
        let backend = HttpChatBackend::with_transport(config(0), None, stub.clone()).unwrap();
        let req = ChatRequest::new(vec![ChatTurn::user_with_image(
            "what?",
            ImageRef::from_bytes(vec![0xFF, 0xD8, 0xFF, 0x00]),
        )]);
        backend.chat(&req).unwrap();
        let body = &stub.seen.lock().unwrap()[0].2;
        let parts = body["messages"][0]["content"].as_array().unwrap();
        assert!(parts[0]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/jpeg;base64,"));
        assert_eq!(parts[1]["text"], "what?");
    }

    #[test]
    fn content_parts_and_empty_replies() {
        let stub = RecordingStub::new(
            vec![ok(json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]}))],
            chat_ok(""),
        );
        let backend = HttpChatBackend::with_transport(config(0), None, stub).unwrap();
        assert_eq!(backend.chat(&request()).unwrap(), "ab");
        assert!(matches!(backend.chat(&request()), Err(BackendError::InvalidResponse(_))));
    }

    #[test]
    fn embedder_normalizes_and_pins_dimension() {
        let stub = RecordingStub::new(
            vec![
                ok(json!({"data": [{"embedding": [3.0, 4.0]}]})),
                ok(json!({"data": [{"embedding": [1.0, 0.0, 0.0]}]})),
            ],
            Err(TransportFailure::Timeout),
        );
        let emb = HttpEmbedder::with_transport(config(0), None, stub.clone()).unwrap();
        let img = ImageRef::Url("https://example.com/a.jpg".into());
        assert_eq!(emb.embed(&img).unwrap(), vec![0.6, 0.8]);
        assert_eq!(
            emb.embed(&img),
            Err(BackendError::DimensionMismatch { expected: 2, actual: 3 })
        );
        assert!(stub.seen.lock().unwrap()[0].0.ends_with("/v1/embeddings"));
        assert!(emb.embed(&ImageRef::Url(String::new())).is_err());
    }
}
