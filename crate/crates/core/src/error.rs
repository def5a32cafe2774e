use thiserror::Error;

use crate::backends::BackendError;
use crate::config::ConfigError;
use crate::detection::DetectionError;
use crate::dictionary::DictionaryError;
use crate::evaluation::EvalError;
use crate::generation::GenerationError;
use crate::pipeline::PipelineError;
use crate::reflection::ReflectionError;
use crate::registry::RegistryError;
use crate::service::{ServeError, ServiceError};

/// Any failure surfaced by the library's entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Reflection(#[from] ReflectionError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
