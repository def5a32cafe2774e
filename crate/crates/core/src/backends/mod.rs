//! Model backends: the small VLM, the large VLM and the image embedder.
//!
//! Pipeline stages only talk to the [`ChatBackend`] and [`Embedder`] traits. Two
//! implementations ship here: an OpenAI-compatible HTTP client ([`http`]) and a deterministic
//! scripted stand-in ([`scripted`]) used by tests, the evaluation harness and demo configs.

pub mod http;
pub mod scripted;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpChatBackend, HttpEmbedder, HttpReply, HttpTransport, ReqwestTransport, TransportFailure};
pub use scripted::{MockEmbedder, ScriptRule, ScriptedBackend, ScriptedBehavior, ScriptedError};

pub const SMALL_API_KEY_ENV: &str = "SLC_SMALL_API_KEY";
pub const LARGE_API_KEY_ENV: &str = "SLC_LARGE_API_KEY";
pub const EMBED_API_KEY_ENV: &str = "SLC_EMBED_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("model refused the request (status {status}): {message}")]
    ModelRefused { status: u16, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("image unavailable: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// An image handed to a model: raw bytes, a URL (including `data:` URLs) or a local path.
#[derive(Clone, PartialEq, Eq, Hash)]
pub enum ImageRef {
    Bytes(Arc<[u8]>),
    Url(String),
    Path(PathBuf),
}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Bytes(b) => write!(f, "Bytes({} bytes)", b.len()),
            ImageRef::Url(u) if u.len() > 64 => write!(f, "Url({}...)", &u[..64]),
            ImageRef::Url(u) => write!(f, "Url({u})"),
            ImageRef::Path(p) => write!(f, "Path({})", p.display()),
        }
    }
}

impl ImageRef {
    /// Interprets a string as a URL when it has an `http(s)` or `data` scheme, else as a path.
    pub fn parse(s: &str) -> Self {
        let lower = s.trim_start().to_ascii_lowercase();
        if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("data:") {
            ImageRef::Url(s.trim().to_string())
        } else {
            ImageRef::Path(PathBuf::from(s))
        }
    }

    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Self {
        ImageRef::Bytes(Arc::from(bytes.into()))
    }

    pub fn is_empty(&self) -> bool {
        match self {
            ImageRef::Bytes(b) => b.is_empty(),
            ImageRef::Url(u) => u.trim().is_empty(),
            ImageRef::Path(p) => p.as_os_str().is_empty(),
        }
    }

    /// Stable identity used by scripted backends and transcripts: the URL or path as given,
    /// or `sha256:<hex>` of the bytes.
    pub fn key(&self) -> String {
        match self {
            ImageRef::Bytes(b) => format!("sha256:{}", hex_digest(b)),
            ImageRef::Url(u) => u.clone(),
            ImageRef::Path(p) => p.display().to_string(),
        }
    }

    /// Image as a URL suitable for a chat-completions `image_url` part. Local bytes become a
    /// base64 `data:` URL.
    pub fn to_url(&self) -> Result<String, BackendError> {
        let bytes = match self {
            ImageRef::Url(u) => return Ok(u.clone()),
            ImageRef::Bytes(b) => b.to_vec(),
            ImageRef::Path(p) => std::fs::read(p)
                .map_err(|e| BackendError::Image(format!("{}: {e}", p.display())))?,
        };
        if bytes.is_empty() {
            return Err(BackendError::Image("empty image".into()));
        }
        Ok(format!(
            "data:{};base64,{}",
            sniff_mime(&bytes),
            base64::engine::general_purpose::STANDARD.encode(&bytes)
        ))
    }
}

impl Serialize for ImageRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(ImageRef::parse(&s))
    }
}

fn sniff_mime(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [0xFF, 0xD8, 0xFF, ..] => "image/jpeg",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        _ => "application/octet-stream",
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user_with_image(text: impl Into<String>, image: ImageRef) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: vec![image],
        }
    }
}

/// One chat call. `adapter_ref`, when set, selects the small model's meta-adapter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatRequest {
    pub turns: Vec<ChatTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_ref: Option<String>,
}

impl ChatRequest {
    pub fn new(turns: Vec<ChatTurn>) -> Self {
        Self {
            turns,
            adapter_ref: None,
        }
    }

    pub fn with_adapter(mut self, adapter_ref: impl Into<String>) -> Self {
        self.adapter_ref = Some(adapter_ref.into());
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.turns.is_empty() {
            return Err(BackendError::InvalidRequest("no turns".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if !t.images.is_empty() && t.role != Role::User {
                return Err(BackendError::InvalidRequest(format!(
                    "turn {i}: images are only allowed in user turns"
                )));
            }
            if t.text.is_empty() && t.images.is_empty() {
                return Err(BackendError::InvalidRequest(format!("turn {i} is empty")));
            }
        }
        Ok(())
    }

    /// All turn texts joined by newlines.
    pub fn joined_text(&self) -> String {
        self.turns.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.turns.iter().flat_map(|t| t.images.iter())
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    /// Unit-length embedding of `image`.
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).chat(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        (**self).embed(image)
    }
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    250
}

/// Connection settings for one HTTP model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Endpoint root, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub adapter_ref: Option<String>,
    #[serde(default = "default_timeout_secs", alias = "timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            adapter_ref: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            max_tokens: None,
            retry_backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(BackendError::InvalidRequest("timeout must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(BackendError::InvalidRequest("model_name is empty".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(BackendError::InvalidRequest("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Model identifier sent on the wire: `<model>:<adapter_ref>` when an adapter is active.
    pub fn model_identifier(&self, adapter_override: Option<&str>) -> String {
        match adapter_override.or(self.adapter_ref.as_deref()) {
            Some(a) if !a.is_empty() => format!("{}:{}", self.model_name, a),
            _ => self.model_name.clone(),
        }
    }
}
