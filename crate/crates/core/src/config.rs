//! Application configuration, read from a TOML file.
//!
//! ```toml
//! registry = "registry.json"
//! dictionary = "dictionary.json"
//! top_k = 1
//! weighting = "mean"
//! listen = "127.0.0.1:8080"
//! log_level = "info"
//!
//! [small_model]
//! kind = "http"
//! base_url = "http://localhost:8000/v1"
//! model_name = "qwen2-vl-2b"
//!
//! [large_model]
//! kind = "scripted"
//! default_reply = "yes"
//!
//! [embedder]
//! kind = "mock"
//! dimension = 4
//! ```
//!
//! Relative paths are resolved against the directory holding the config file. API keys come
//! from the environment, never from the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendConfig, BackendError, ChatBackend, Embedder, HttpChatBackend, HttpEmbedder, MockEmbedder,
    ScriptedBackend, ScriptedBehavior, EMBED_API_KEY_ENV, LARGE_API_KEY_ENV, SMALL_API_KEY_ENV,
};
use crate::dictionary::DEFAULT_TOP_K;
use crate::evaluation::Weighting;
use crate::pipeline::Pipeline;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid {role} backend: {source}")]
    Backend {
        role: &'static str,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChatBackendConfig {
    Http(BackendConfig),
    Scripted(ScriptedBehavior),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderConfig {
    Http {
        #[serde(flatten)]
        config: BackendConfig,
        #[serde(default)]
        dimension: Option<usize>,
    },
    Mock(MockEmbedder),
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_log_level() -> String {
    "info".into()
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub small_model: ChatBackendConfig,
    pub large_model: ChatBackendConfig,
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    /// Samples evaluated concurrently by `run-eval`.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn env_key(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn build_chat(cfg: &ChatBackendConfig, key_env: &str, role: &'static str) -> Result<Arc<dyn ChatBackend>, ConfigError> {
    Ok(match cfg {
        ChatBackendConfig::Http(c) => Arc::new(
            HttpChatBackend::new(c.clone(), env_key(key_env)).map_err(|source| ConfigError::Backend { role, source })?,
        ),
        ChatBackendConfig::Scripted(b) => Arc::new(ScriptedBackend::new(b.clone())),
    })
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` and resolves relative file paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut config.registry, &mut config.dictionary].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.top_k == 0 {
            return Err(ConfigError::Invalid("top_k must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        for (role, cfg) in [("small", &self.small_model), ("large", &self.large_model)] {
            if let ChatBackendConfig::Http(c) = cfg {
                c.validate().map_err(|source| ConfigError::Backend { role, source })?;
            }
        }
        match &self.embedder {
            EmbedderConfig::Http { config, .. } => config
                .validate()
                .map_err(|source| ConfigError::Backend { role: "embedder", source })?,
            EmbedderConfig::Mock(m) if m.dimension < 2 => {
                return Err(ConfigError::Invalid("mock embedder dimension must be at least 2".into()));
            }
            EmbedderConfig::Mock(_) => {}
        }
        Ok(())
    }

    pub fn small_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        build_chat(&self.small_model, SMALL_API_KEY_ENV, "small")
    }

    pub fn large_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        build_chat(&self.large_model, LARGE_API_KEY_ENV, "large")
    }

    pub fn pipeline(&self) -> Result<Pipeline, ConfigError> {
        Ok(Pipeline::new(self.small_backend()?, self.large_backend()?))
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match &self.embedder {
            EmbedderConfig::Http { config, dimension } => {
                let e = HttpEmbedder::new(config.clone(), env_key(EMBED_API_KEY_ENV))
                    .map_err(|source| ConfigError::Backend { role: "embedder", source })?;
                Arc::new(match dimension {
                    Some(d) => e.expecting_dimension(*d),
                    None => e,
                })
            }
            EmbedderConfig::Mock(m) => Arc::new(m.clone()),
        })
    }
}
