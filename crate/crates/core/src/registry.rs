//! User concept registry.
//!
//! A [`Concept`] is a user-registered entity (a pet, a person, an object) with a short text
//! description and one or more reference-image embeddings. Every embedding is L2-normalized on
//! ingestion, so the registry only ever holds unit vectors. The concept embedding is the
//! normalized mean of its reference embeddings; the scenario embedding is the normalized mean of
//! the concept embeddings.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::{self, VectorError};

pub const REGISTRY_FORMAT_VERSION: u32 = 1;

/// Stored concept embeddings must re-derive to within this tolerance on load.
const REDERIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("malformed concept id {0:?}: expected `<name>`")]
    MalformedId(String),
    #[error("concept {0} is already registered")]
    DuplicateId(String),
    #[error("concept {0} not found")]
    UnknownId(String),
    #[error("description must not be empty")]
    EmptyDescription,
    #[error("at least one reference embedding is required")]
    EmptyEmbeddings,
    #[error("scenario must contain at least one concept")]
    EmptyScenario,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(VectorError),
    #[error("unsupported registry format version {0}")]
    UnsupportedVersion(u32),
    #[error("registry document is inconsistent: {0}")]
    Corrupt(String),
    #[error("registry i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry parse: {0}")]
    Parse(#[from] serde_json::Error),
}

impl From<VectorError> for RegistryError {
    fn from(e: VectorError) -> Self {
        match e {
            VectorError::DimensionMismatch { expected, actual } => {
                RegistryError::DimensionMismatch { expected, actual }
            }
            VectorError::Empty => RegistryError::EmptyEmbeddings,
            other => RegistryError::InvalidEmbedding(other),
        }
    }
}

/// Concept identifier of the form `<name>`, where `name` is non-empty and contains no angle
/// brackets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptId(String);

impl ConceptId {
    pub fn new(raw: impl Into<String>) -> Result<Self, RegistryError> {
        let raw = raw.into();
        let inner = raw
            .strip_prefix('<')
            .and_then(|s| s.strip_suffix('>'))
            .ok_or_else(|| RegistryError::MalformedId(raw.clone()))?;
        if inner.is_empty() || inner.contains(['<', '>']) {
            return Err(RegistryError::MalformedId(raw));
        }
        Ok(Self(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ConceptId {
    type Err = RegistryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl TryFrom<String> for ConceptId {
    type Error = RegistryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<ConceptId> for String {
    fn from(id: ConceptId) -> Self {
        id.0
    }
}

impl PartialEq<str> for ConceptId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for ConceptId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub description: String,
    pub reference_embeddings: Vec<Vec<f64>>,
    pub concept_embedding: Vec<f64>,
}

impl Concept {
    /// Builds a concept, normalizing every reference embedding and deriving the concept
    /// embedding.
    pub fn new(
        id: ConceptId,
        description: impl Into<String>,
        reference_embeddings: Vec<Vec<f64>>,
    ) -> Result<Self, RegistryError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(RegistryError::EmptyDescription);
        }
        let first = reference_embeddings
            .first()
            .ok_or(RegistryError::EmptyEmbeddings)?;
        let dim = first.len();
        if dim < 2 {
            return Err(RegistryError::DimensionTooSmall(dim));
        }
        let reference_embeddings = reference_embeddings
            .iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(RegistryError::DimensionMismatch {
                        expected: dim,
                        actual: v.len(),
                    });
                }
                Ok(vector::normalized(v)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let concept_embedding = derive_concept_embedding(&reference_embeddings)?;
        Ok(Self {
            id,
            description,
            reference_embeddings,
            concept_embedding,
        })
    }

    pub fn dimension(&self) -> usize {
        self.concept_embedding.len()
    }

    /// Recomputes the concept embedding from the stored reference embeddings.
    pub fn rederive_embedding(&self) -> Result<Vec<f64>, RegistryError> {
        derive_concept_embedding(&self.reference_embeddings)
    }
}

fn derive_concept_embedding(refs: &[Vec<f64>]) -> Result<Vec<f64>, RegistryError> {
    Ok(vector::normalized_mean(refs.iter().map(Vec::as_slice))?)
}

/// Normalized mean of the concept embeddings. Invariant under reordering of `concepts`.
pub fn scenario_embedding(concepts: &[Concept]) -> Result<Vec<f64>, RegistryError> {
    if concepts.is_empty() {
        return Err(RegistryError::EmptyScenario);
    }
    Ok(vector::normalized_mean(
        concepts.iter().map(|c| c.concept_embedding.as_slice()),
    )?)
}

/// The set of concepts a user has registered, with its derived embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    concepts: Vec<Concept>,
    embedding: Vec<f64>,
}

impl Scenario {
    pub fn new(concepts: Vec<Concept>) -> Result<Self, RegistryError> {
        for (i, c) in concepts.iter().enumerate() {
            if concepts[..i].iter().any(|o| o.id == c.id) {
                return Err(RegistryError::DuplicateId(c.id.to_string()));
            }
        }
        let embedding = scenario_embedding(&concepts)?;
        Ok(Self {
            concepts,
            embedding,
        })
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn ids(&self) -> Vec<ConceptId> {
        self.concepts.iter().map(|c| c.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

/// In-memory concept store with registration order preserved.
///
/// Mutation goes through `&mut self`; callers sharing a registry across threads wrap it in a
/// lock so there is a single writer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    concepts: Vec<Concept>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDocument {
    format_version: u32,
    embedding_dimension: Option<usize>,
    concepts: Vec<Concept>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.concepts.first().map(Concept::dimension)
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.id.as_str() == id)
    }

    pub fn register_concept(
        &mut self,
        id: &str,
        description: &str,
        reference_embeddings: Vec<Vec<f64>>,
    ) -> Result<&Concept, RegistryError> {
        let id = ConceptId::new(id)?;
        if self.get(id.as_str()).is_some() {
            return Err(RegistryError::DuplicateId(id.to_string()));
        }
        let concept = Concept::new(id, description, reference_embeddings)?;
        if let Some(expected) = self.dimension() {
            if concept.dimension() != expected {
                return Err(RegistryError::DimensionMismatch {
                    expected,
                    actual: concept.dimension(),
                });
            }
        }
        self.concepts.push(concept);
        Ok(self.concepts.last().expect("just pushed"))
    }

    /// The whole registry as one scenario.
    pub fn scenario(&self) -> Result<Scenario, RegistryError> {
        Scenario::new(self.concepts.clone())
    }

    /// Scenario restricted to `ids`, kept in registration order.
    pub fn scenario_for(&self, ids: &[impl AsRef<str>]) -> Result<Scenario, RegistryError> {
        for id in ids {
            if self.get(id.as_ref()).is_none() {
                return Err(RegistryError::UnknownId(id.as_ref().to_string()));
            }
        }
        let concepts = self
            .concepts
            .iter()
            .filter(|c| ids.iter().any(|id| id.as_ref() == c.id.as_str()))
            .cloned()
            .collect();
        Scenario::new(concepts)
    }

    pub fn to_json(&self) -> Result<String, RegistryError> {
        let doc = RegistryDocument {
            format_version: REGISTRY_FORMAT_VERSION,
            embedding_dimension: self.dimension(),
            concepts: self.concepts.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, RegistryError> {
        let doc: RegistryDocument = serde_json::from_str(text)?;
        if doc.format_version != REGISTRY_FORMAT_VERSION {
            return Err(RegistryError::UnsupportedVersion(doc.format_version));
        }
        let mut registry = Registry::new();
        for stored in doc.concepts {
            let rebuilt = registry
                .register_concept(
                    stored.id.as_str(),
                    &stored.description,
                    stored.reference_embeddings.clone(),
                )?
                .clone();
            if rebuilt.reference_embeddings != stored.reference_embeddings {
                // Non-unit inputs were hand-edited into the file; keep the normalized form.
                tracing::warn!(id = %stored.id, "registry held non-normalized reference embeddings");
            }
            let drift = if stored.concept_embedding.len() == rebuilt.concept_embedding.len() {
                vector::squared_distance(&stored.concept_embedding, &rebuilt.concept_embedding)
                    .sqrt()
            } else {
                f64::INFINITY
            };
            if drift > REDERIVE_TOLERANCE {
                return Err(RegistryError::Corrupt(format!(
                    "stored concept_embedding of {} does not match its reference embeddings",
                    stored.id
                )));
            }
        }
        if let (Some(declared), Some(actual)) = (doc.embedding_dimension, registry.dimension()) {
            if declared != actual {
                return Err(RegistryError::Corrupt(format!(
                    "embedding_dimension {declared} but concepts have dimension {actual}"
                )));
            }
        }
        Ok(registry)
    }

    /// Loads a registry file. A missing file yields an empty registry.
    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes the registry atomically: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        write_atomic(path, self.to_json()?.as_bytes())?;
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
