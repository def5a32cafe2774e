//! HTTP service exposing the registry and the pipeline.
//!
//! | route            | body                                             | reply                    |
//! |------------------|--------------------------------------------------|--------------------------|
//! | `POST /concepts` | JSON `{id, description, images[]}` or multipart  | 201, the stored concept  |
//! | `GET /concepts`  |                                                  | concepts in order        |
//! | `POST /ask`      | JSON `{image, question}` or multipart            | answer plus full audit   |
//! | `POST /ask-text` | JSON `{question}`                                | `{answer}`               |
//! | `GET /healthz`   |                                                  | `{status, concepts}`     |
//!
//! Images in JSON bodies are `http(s)` or `data:` URLs; multipart bodies carry the raw file.
//! One service instance serves one scenario: every registered concept. Adapter selection and
//! identity extraction are cached until the registry changes.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{error, info};

use crate::backends::{BackendError, Embedder, ImageRef};
use crate::detection::{Cue, CueReport, Query};
use crate::dictionary::{Dictionary, SelectionResult};
use crate::generation::DetectionReportContext;
use crate::pipeline::{Ablation, Pipeline, PipelineError, PreparedScenario};
use crate::reflection::ConceptAudit;
use crate::registry::{ConceptId, Registry, RegistryError};

const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("embedder failed: {0}")]
    Embedder(BackendError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("no concepts registered")]
    NoConcepts,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        match self {
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Registry(e) => match e {
                RegistryError::DuplicateId(_) => (StatusCode::CONFLICT, "duplicate_id"),
                RegistryError::MalformedId(_) => (StatusCode::BAD_REQUEST, "malformed_id"),
                RegistryError::EmptyEmbeddings => (StatusCode::BAD_REQUEST, "empty_embeddings"),
                RegistryError::EmptyDescription => (StatusCode::BAD_REQUEST, "empty_description"),
                RegistryError::DimensionMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
                RegistryError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "persistence_failed"),
                _ => (StatusCode::UNPROCESSABLE_ENTITY, "registry_error"),
            },
            ServiceError::Embedder(BackendError::InvalidRequest(_) | BackendError::Image(_)) => {
                (StatusCode::BAD_REQUEST, "bad_image")
            }
            ServiceError::Embedder(_) => (StatusCode::BAD_GATEWAY, "embedder_failed"),
            ServiceError::Pipeline(PipelineError::Selection(_)) => (StatusCode::CONFLICT, "selection_failed"),
            ServiceError::Pipeline(_) => (StatusCode::BAD_GATEWAY, "pipeline_failed"),
            ServiceError::NoConcepts => (StatusCode::CONFLICT, "no_concepts"),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            error!(error = %self, "request failed");
        }
        (status, Json(json!({"error": code, "message": self.to_string()}))).into_response()
    }
}

/// Shared service state. Registry writes are serialized by `write_lock`.
pub struct AppState {
    registry: RwLock<Registry>,
    registry_path: Option<PathBuf>,
    dictionary: Dictionary,
    top_k: usize,
    pipeline: Pipeline,
    embedder: Arc<dyn Embedder>,
    prepared: Mutex<Option<Arc<PreparedScenario>>>,
    write_lock: Mutex<()>,
}

impl AppState {
    pub fn new(
        registry: Registry,
        registry_path: Option<PathBuf>,
        dictionary: Dictionary,
        top_k: usize,
        pipeline: Pipeline,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        Self {
            registry: RwLock::new(registry),
            registry_path,
            dictionary,
            top_k,
            pipeline,
            embedder,
            prepared: Mutex::new(None),
            write_lock: Mutex::new(()),
        }
    }

    /// Cached selection and identities for the current registry.
    pub fn prepared(&self) -> Result<Arc<PreparedScenario>, ServiceError> {
        let mut cache = self.prepared.lock().unwrap();
        if let Some(p) = cache.as_ref() {
            return Ok(p.clone());
        }
        let registry = self.registry.read().unwrap();
        if registry.is_empty() {
            return Err(ServiceError::NoConcepts);
        }
        let p = Arc::new(PreparedScenario::new(registry.scenario()?, &self.dictionary, self.top_k)?);
        *cache = Some(p.clone());
        Ok(p)
    }

    /// Embeds `images`, registers the concept and persists the registry. Nothing changes if
    /// any step fails.
    pub fn register(&self, id: &str, description: &str, images: &[ImageRef]) -> Result<ConceptView, ServiceError> {
        if images.is_empty() {
            return Err(RegistryError::EmptyEmbeddings.into());
        }
        let embeddings = images
            .iter()
            .map(|i| self.embedder.embed(i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ServiceError::Embedder)?;
        let _writer = self.write_lock.lock().unwrap();
        let mut next = self.registry.read().unwrap().clone();
        let view = ConceptView::from(next.register_concept(id, description, embeddings)?);
        if let Some(path) = &self.registry_path {
            next.save(path)?;
        }
        *self.registry.write().unwrap() = next;
        *self.prepared.lock().unwrap() = None;
        info!(id, "concept registered");
        Ok(view)
    }

    pub fn concepts(&self) -> Vec<ConceptView> {
        self.registry.read().unwrap().concepts().iter().map(ConceptView::from).collect()
    }

    pub fn ask(&self, image: ImageRef, question: &str, ablation: Ablation) -> Result<AskResponse, ServiceError> {
        let query = Query::new(image, question).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let prepared = self.prepared()?;
        let turn = self.pipeline.ask(&prepared, &query, ablation)?;
        Ok(AskResponse {
            answer: turn.answer,
            cues: turn.cues,
            verified_cues: turn.verified_cues,
            audit: turn.audit,
            adapter: turn.adapter,
            context: turn.context,
        })
    }

    pub fn ask_text(&self, question: &str) -> Result<String, ServiceError> {
        if question.trim().is_empty() {
            return Err(ServiceError::BadRequest("question must not be empty".into()));
        }
        let prepared = self.prepared()?;
        Ok(self.pipeline.ask_text(&prepared, question)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub id: ConceptId,
    pub description: String,
    pub embedding_dimension: usize,
    pub reference_count: usize,
    pub concept_embedding: Vec<f64>,
}

impl From<&crate::registry::Concept> for ConceptView {
    fn from(c: &crate::registry::Concept) -> Self {
        Self {
            id: c.id.clone(),
            description: c.description.clone(),
            embedding_dimension: c.dimension(),
            reference_count: c.reference_embeddings.len(),
            concept_embedding: c.concept_embedding.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    pub cues: Option<CueReport>,
    pub verified_cues: BTreeMap<ConceptId, Cue>,
    pub audit: BTreeMap<ConceptId, ConceptAudit>,
    pub adapter: Option<SelectionResult>,
    pub context: DetectionReportContext,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    id: String,
    description: String,
    #[serde(default)]
    images: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AskBody {
    image: String,
    question: String,
    #[serde(default = "yes")]
    use_small: bool,
    #[serde(default = "yes")]
    use_reflection: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AskTextBody {
    question: String,
}

fn url_image(s: &str) -> Result<ImageRef, ServiceError> {
    match ImageRef::parse(s) {
        url @ ImageRef::Url(_) => Ok(url),
        _ => Err(ServiceError::BadRequest(format!("image must be an http(s) or data URL, got {s:?}"))),
    }
}

fn is_multipart(req: &Request) -> bool {
    req.headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

/// Text fields and file parts of a multipart body.
#[derive(Default)]
struct Form {
    fields: BTreeMap<String, String>,
    files: Vec<(String, ImageRef)>,
}

async fn read_form(req: Request) -> Result<Form, ServiceError> {
    let bad = |e: axum::extract::multipart::MultipartError| ServiceError::BadRequest(e.body_text());
    let mut multipart = Multipart::from_request(req, &())
        .await
        .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let mut form = Form::default();
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        if field.file_name().is_some() {
            let bytes = field.bytes().await.map_err(bad)?;
            form.files.push((name, ImageRef::from_bytes(bytes.to_vec())));
        } else {
            let text = field.text().await.map_err(bad)?;
            if matches!(name.as_str(), "images" | "image") {
                form.files.push((name, url_image(&text)?));
            } else {
                form.fields.insert(name, text);
            }
        }
    }
    Ok(form)
}

async fn json_body<T: serde::de::DeserializeOwned>(req: Request) -> Result<T, ServiceError> {
    Json::<T>::from_request(req, &())
        .await
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn field(form: &Form, name: &str) -> Result<String, ServiceError> {
    form.fields
        .get(name)
        .cloned()
        .ok_or_else(|| ServiceError::BadRequest(format!("missing field `{name}`")))
}

fn flag(form: &Form, name: &str) -> Result<bool, ServiceError> {
    match form.fields.get(name).map(|s| s.trim()) {
        None => Ok(true),
        Some("true") | Some("1") => Ok(true),
        Some("false") | Some("0") => Ok(false),
        Some(other) => Err(ServiceError::BadRequest(format!("`{name}` must be true or false, got {other:?}"))),
    }
}

/// Runs blocking pipeline work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn post_concepts(State(state): State<Arc<AppState>>, req: Request) -> Result<impl IntoResponse, ServiceError> {
    let (id, description, images) = if is_multipart(&req) {
        let form = read_form(req).await?;
        let images = form.files.iter().map(|(_, i)| i.clone()).collect();
        (field(&form, "id")?, field(&form, "description")?, images)
    } else {
        let body: RegisterBody = json_body(req).await?;
        let images = body.images.iter().map(|s| url_image(s)).collect::<Result<Vec<_>, _>>()?;
        (body.id, body.description, images)
    };
    let view = blocking(move || state.register(&id, &description, &images)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_concepts(State(state): State<Arc<AppState>>) -> Json<Vec<ConceptView>> {
    Json(state.concepts())
}

async fn post_ask(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<AskResponse>, ServiceError> {
    let (image, question, ablation) = if is_multipart(&req) {
        let form = read_form(req).await?;
        let image = match form.files.as_slice() {
            [(_, image)] => image.clone(),
            _ => return Err(ServiceError::BadRequest("expected exactly one image".into())),
        };
        let ablation = Ablation {
            use_small: flag(&form, "use_small")?,
            use_reflection: flag(&form, "use_reflection")?,
        };
        (image, field(&form, "question")?, ablation)
    } else {
        let body: AskBody = json_body(req).await?;
        let ablation = Ablation {
            use_small: body.use_small,
            use_reflection: body.use_reflection,
        };
        (url_image(&body.image)?, body.question, ablation)
    };
    Ok(Json(blocking(move || state.ask(image, &question, ablation)).await?))
}

async fn post_ask_text(State(state): State<Arc<AppState>>, req: Request) -> Result<impl IntoResponse, ServiceError> {
    let body: AskTextBody = json_body(req).await?;
    let answer = blocking(move || state.ask_text(&body.question)).await?;
    Ok(Json(json!({ "answer": answer })))
}

async fn healthz(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(json!({"status": "ok", "concepts": state.registry.read().unwrap().len()}))
}

async fn log_requests(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_string());
    let started = Instant::now();
    let response = next.run(req).await;
    info!(
        %method,
        path,
        status = response.status().as_u16(),
        elapsed_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    response
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/concepts", post(post_concepts).get(get_concepts))
        .route("/ask", post(post_ask))
        .route("/ask-text", post(post_ask_text))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid listen address {0:?}")]
    InvalidAddress(String),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Serves until Ctrl-C or SIGTERM. `state` must outlive the runtime; the caller keeps a clone so
/// blocking backend clients are never dropped on an async worker.
pub async fn serve(state: Arc<AppState>, listen: &str) -> Result<(), ServeError> {
    let addr: SocketAddr = listen.parse().map_err(|_| ServeError::InvalidAddress(listen.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::BindFailure {
            addr: listen.to_string(),
            source,
        })?;
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    info!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
