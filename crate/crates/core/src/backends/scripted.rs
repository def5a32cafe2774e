//! Deterministic stand-ins for the model backends.
//!
//! A [`ScriptedBackend`] answers each chat request with the reply of the first rule whose
//! matcher accepts it, else with the default reply. Replies depend only on the request, so any
//! transcript replays identically. Every request is also recorded for inspection.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest, Embedder, ImageRef, Role};
use crate::vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedError {
    Timeout,
    Transport,
    AuthFailure,
    Refused,
}

impl ScriptedError {
    fn to_error(self) -> BackendError {
        match self {
            ScriptedError::Timeout => BackendError::Timeout,
            ScriptedError::Transport => BackendError::Transport("scripted transport failure".into()),
            ScriptedError::AuthFailure => BackendError::AuthFailure("scripted auth failure".into()),
            ScriptedError::Refused => BackendError::ModelRefused {
                status: 400,
                message: "scripted refusal".into(),
            },
        }
    }
}

/// Request matcher plus canned outcome. All present conditions must hold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    /// Substrings that must all occur in the joined turn texts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// Substrings that must not occur.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_contains: Vec<String>,
    /// Restricts `contains`/`not_contains` to turns with this role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    /// Substring of some attached image's key (path, URL or `sha256:` digest).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// Exact adapter reference the request must carry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    #[serde(default)]
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedError>,
}

impl ScriptRule {
    pub fn reply_when(contains: &[&str], reply: impl Into<String>) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            reply: reply.into(),
            ..Default::default()
        }
    }

    pub fn with_image(mut self, image: impl Into<String>) -> Self {
        self.image = Some(image.into());
        self
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn excluding(mut self, text: impl Into<String>) -> Self {
        self.not_contains.push(text.into());
        self
    }

    pub fn fail_when(contains: &[&str], error: ScriptedError) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            error: Some(error),
            ..Default::default()
        }
    }

    pub fn matches(&self, request: &ChatRequest) -> bool {
        let text = match self.role {
            Some(role) => request
                .turns
                .iter()
                .filter(|t| t.role == role)
                .map(|t| t.text.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
            None => request.joined_text(),
        };
        self.contains.iter().all(|c| text.contains(c.as_str()))
            && !self.not_contains.iter().any(|c| text.contains(c.as_str()))
            && self
                .image
                .as_ref()
                .is_none_or(|want| request.images().any(|i| i.key().contains(want.as_str())))
            && self
                .adapter
                .as_ref()
                .is_none_or(|want| request.adapter_ref.as_deref() == Some(want.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptedBehavior {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default_reply: String,
}

impl ScriptedBehavior {
    pub fn new(default_reply: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_reply: default_reply.into(),
        }
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn respond(&self, request: &ChatRequest) -> Result<String, BackendError> {
        match self.rules.iter().find(|r| r.matches(request)) {
            Some(rule) => match rule.error {
                Some(e) => Err(e.to_error()),
                None => Ok(rule.reply.clone()),
            },
            None => Ok(self.default_reply.clone()),
        }
    }
}

/// Scripted chat model. The rule table is fixed at construction.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    behavior: ScriptedBehavior,
    calls: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(behavior: ScriptedBehavior) -> Self {
        Self {
            behavior,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Always answers `reply`.
    pub fn constant(reply: impl Into<String>) -> Self {
        Self::new(ScriptedBehavior::new(reply))
    }

    pub fn behavior(&self) -> &ScriptedBehavior {
        &self.behavior
    }

    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        request.validate()?;
        self.calls.lock().unwrap().push(request.clone());
        self.behavior.respond(request)
    }
}

/// Table-driven embedder. Unknown images get a pseudo-random unit vector derived from the
/// SHA-256 of their key, so results are stable across runs and processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEmbedder {
    pub dimension: usize,
    #[serde(default)]
    pub table: BTreeMap<String, Vec<f64>>,
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            table: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, embedding: Vec<f64>) -> Self {
        self.table.insert(key.into(), embedding);
        self
    }

    fn hashed(&self, key: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dimension);
        let mut counter = 0u32;
        while out.len() < self.dimension {
            let digest = Sha256::new()
                .chain_update(key.as_bytes())
                .chain_update(counter.to_le_bytes())
                .finalize();
            for chunk in digest.chunks(4) {
                if out.len() == self.dimension {
                    break;
                }
                let word = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                out.push(word as f64 / u32::MAX as f64 * 2.0 - 1.0);
            }
            counter += 1;
        }
        out
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        if image.is_empty() {
            return Err(BackendError::InvalidRequest("empty image".into()));
        }
        let key = image.key();
        let raw = match self.table.get(&key) {
            Some(v) => v.clone(),
            None => self.hashed(&key),
        };
        if raw.len() != self.dimension {
            return Err(BackendError::DimensionMismatch {
                expected: self.dimension,
                actual: raw.len(),
            });
        }
        vector::normalized(&raw).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}
