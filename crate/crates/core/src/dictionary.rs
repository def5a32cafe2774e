//! Offline meta-concept dictionary and tuning-free adapter selection.
//!
//! Building clusters the registered concept embeddings with k-means; each cluster is
//! represented by its member concept closest to the centroid, paired with the adapter trained
//! for that cluster. At query time the scenario embedding picks adapters by cosine similarity.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans::{self, ClusterError};
use crate::registry::{Concept, ConceptId};
use crate::vector;

pub const DICTIONARY_FORMAT_VERSION: u32 = 1;
/// Number of meta-concepts used by the reference configuration.
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TOP_K: usize = 1;
pub const DEFAULT_MAX_ITERS: usize = 100;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("no adapter_ref supplied for cluster {0}")]
    MissingAdapterRef(usize),
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid dictionary: {0}")]
    Invalid(String),
    #[error("unsupported dictionary format version {0}")]
    UnsupportedVersion(u32),
    #[error("dictionary i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dictionary parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConcept {
    pub index: usize,
    /// Embedding of the cluster's representative concept (unit length).
    pub embedding: Vec<f64>,
    /// Adapter identifier understood by the small-model serving layer.
    pub adapter_ref: String,
    pub member_ids: Vec<ConceptId>,
    pub representative_id: ConceptId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub k: usize,
    pub embedding_dimension: usize,
    pub seed: u64,
    pub entries: Vec<MetaConcept>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryDocument {
    format_version: u32,
    #[serde(flatten)]
    dictionary: Dictionary,
}

/// Clusters `concepts` into `k` meta-concepts. `adapter_refs` must name an adapter for every
/// cluster index in `0..k`.
pub fn build_dictionary(
    concepts: &[Concept],
    k: usize,
    seed: u64,
    adapter_refs: &BTreeMap<usize, String>,
) -> Result<Dictionary, DictionaryError> {
    build_dictionary_with_iters(concepts, k, seed, adapter_refs, DEFAULT_MAX_ITERS)
}

pub fn build_dictionary_with_iters(
    concepts: &[Concept],
    k: usize,
    seed: u64,
    adapter_refs: &BTreeMap<usize, String>,
    max_iters: usize,
) -> Result<Dictionary, DictionaryError> {
    for idx in 0..k {
        match adapter_refs.get(&idx) {
            Some(r) if !r.trim().is_empty() => {}
            _ => return Err(DictionaryError::MissingAdapterRef(idx)),
        }
    }
    let points: Vec<Vec<f64>> = concepts.iter().map(|c| c.concept_embedding.clone()).collect();
    let clustering = kmeans::kmeans_cluster(&points, k, seed, max_iters)?;
    let dim = points[0].len();

    let entries = clustering
        .clusters
        .iter()
        .enumerate()
        .map(|(index, cluster)| {
            let rep = representative(&points, &cluster.members, &cluster.centroid);
            MetaConcept {
                index,
                embedding: points[rep].clone(),
                adapter_ref: adapter_refs[&index].clone(),
                member_ids: cluster.members.iter().map(|&i| concepts[i].id.clone()).collect(),
                representative_id: concepts[rep].id.clone(),
            }
        })
        .collect();

    Ok(Dictionary {
        k,
        embedding_dimension: dim,
        seed,
        entries,
    })
}

/// Member with maximum cosine to the centroid; the earliest member wins ties.
pub fn representative(points: &[Vec<f64>], members: &[usize], centroid: &[f64]) -> usize {
    let scores: Vec<f64> = members
        .iter()
        .map(|&i| vector::cosine(&points[i], centroid))
        .collect();
    members[vector::argmax(&scores).expect("clusters are never empty")]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedAdapter {
    pub index: usize,
    pub adapter_ref: String,
    pub score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Descending by score; ties resolved to the lower dictionary index.
    pub chosen: Vec<SelectedAdapter>,
    pub top_k: usize,
}

impl SelectionResult {
    /// The top-ranked adapter.
    pub fn primary(&self) -> &SelectedAdapter {
        &self.chosen[0]
    }

    /// Model-side adapter identifier for the small model. With a fused selection the
    /// references are joined with `+` in rank order.
    pub fn adapter_ref(&self) -> String {
        self.chosen
            .iter()
            .map(|c| c.adapter_ref.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Picks the `top_k` meta-concepts most similar to the scenario embedding.
pub fn select_adapters(
    scenario_embedding: &[f64],
    dictionary: &[MetaConcept],
    top_k: usize,
) -> Result<SelectionResult, DictionaryError> {
    if dictionary.is_empty() {
        return Err(DictionaryError::EmptyDictionary);
    }
    if top_k == 0 {
        return Err(DictionaryError::ZeroTopK);
    }
    let mut scored = dictionary
        .iter()
        .map(|m| {
            if m.embedding.len() != scenario_embedding.len() {
                return Err(DictionaryError::DimensionMismatch {
                    expected: m.embedding.len(),
                    actual: scenario_embedding.len(),
                });
            }
            Ok((m, vector::cosine(scenario_embedding, &m.embedding)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|(ma, sa), (mb, sb)| sb.total_cmp(sa).then(ma.index.cmp(&mb.index)));
    scored.truncate(top_k);
    let weight = 1.0 / scored.len() as f64;
    Ok(SelectionResult {
        chosen: scored
            .into_iter()
            .map(|(m, score)| SelectedAdapter {
                index: m.index,
                adapter_ref: m.adapter_ref.clone(),
                score,
                weight,
            })
            .collect(),
        top_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEntry {
    pub adapter_ref: String,
    pub weight: f64,
}

/// Which adapters the serving layer should average, and with what weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub adapters: Vec<FusionEntry>,
}

pub fn fusion_manifest(selection: &SelectionResult) -> Result<FusionManifest, DictionaryError> {
    if selection.chosen.is_empty() {
        return Err(DictionaryError::Invalid("selection is empty".into()));
    }
    let sum: f64 = selection.chosen.iter().map(|c| c.weight).sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(DictionaryError::Invalid(format!("weights sum to {sum}")));
    }
    Ok(FusionManifest {
        adapters: selection
            .chosen
            .iter()
            .map(|c| FusionEntry {
                adapter_ref: c.adapter_ref.clone(),
                weight: c.weight,
            })
            .collect(),
    })
}

impl Dictionary {
    pub fn select(&self, scenario_embedding: &[f64], top_k: usize) -> Result<SelectionResult, DictionaryError> {
        select_adapters(scenario_embedding, &self.entries, top_k)
    }

    pub fn validate(&self) -> Result<(), DictionaryError> {
        if self.entries.is_empty() {
            return Err(DictionaryError::EmptyDictionary);
        }
        if self.entries.len() != self.k {
            return Err(DictionaryError::Invalid(format!(
                "k = {} but {} entries",
                self.k,
                self.entries.len()
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.index != i {
                return Err(DictionaryError::Invalid(format!("entry {i} has index {}", e.index)));
            }
            if e.embedding.len() != self.embedding_dimension {
                return Err(DictionaryError::DimensionMismatch {
                    expected: self.embedding_dimension,
                    actual: e.embedding.len(),
                });
            }
            if (vector::norm(&e.embedding) - 1.0).abs() > UNIT_TOLERANCE {
                return Err(DictionaryError::Invalid(format!("entry {i} embedding is not unit length")));
            }
            if e.adapter_ref.trim().is_empty() {
                return Err(DictionaryError::Invalid(format!("entry {i} has an empty adapter_ref")));
            }
            if e.member_ids.is_empty() {
                return Err(DictionaryError::Invalid(format!("entry {i} has no members")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, DictionaryError> {
        Ok(serde_json::to_string_pretty(&DictionaryDocument {
            format_version: DICTIONARY_FORMAT_VERSION,
            dictionary: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, DictionaryError> {
        let doc: DictionaryDocument = serde_json::from_str(text)?;
        if doc.format_version != DICTIONARY_FORMAT_VERSION {
            return Err(DictionaryError::UnsupportedVersion(doc.format_version));
        }
        doc.dictionary.validate()?;
        Ok(doc.dictionary)
    }

    pub fn load(path: &Path) -> Result<Self, DictionaryError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DictionaryError> {
        crate::registry::write_atomic(path, self.to_json()?.as_bytes())?;
        Ok(())
    }
}

/// Reads an adapter map file: a JSON object from cluster index to adapter identifier, e.g.
/// `{"0": "metac-0", "1": "metac-1"}`, or a JSON array indexed by position.
pub fn load_adapter_refs(path: &Path) -> Result<BTreeMap<usize, String>, DictionaryError> {
    parse_adapter_refs(&fs::read_to_string(path)?)
}

pub fn parse_adapter_refs(text: &str) -> Result<BTreeMap<usize, String>, DictionaryError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| match v {
                serde_json::Value::String(s) => Ok((i, s)),
                _ => Err(DictionaryError::Invalid(format!("adapter {i} is not a string"))),
            })
            .collect(),
        serde_json::Value::Object(map) => map
            .into_iter()
            .map(|(key, v)| {
                let idx = key
                    .parse::<usize>()
                    .map_err(|_| DictionaryError::Invalid(format!("bad cluster index {key:?}")))?;
                match v {
                    serde_json::Value::String(s) => Ok((idx, s)),
                    _ => Err(DictionaryError::Invalid(format!("adapter {key} is not a string"))),
                }
            })
            .collect(),
        _ => Err(DictionaryError::Invalid("adapter map must be an object or array".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(index: usize, embedding: Vec<f64>) -> MetaConcept {
        MetaConcept {
            index,
            embedding: vector::normalized(&embedding).unwrap(),
            adapter_ref: format!("metac-{index}"),
            member_ids: vec![ConceptId::new(format!("<m{index}>")).unwrap()],
            representative_id: ConceptId::new(format!("<m{index}>")).unwrap(),
        }
    }

    fn concept(id: &str, e: Vec<f64>) -> Concept {
        Concept::new(ConceptId::new(id).unwrap(), "d", vec![e]).unwrap()
    }

    fn refs(k: usize) -> BTreeMap<usize, String> {
        (0..k).map(|i| (i, format!("metac-{i}"))).collect()
    }

    #[test]
    fn representative_is_member_closest_to_centroid() {
        let points = vec![vec![1.0, 0.0], vec![0.8, 0.6]];
        let centroid = vec![0.9, 0.3];
        // brute force over both members
        let c0 = vector::cosine(&points[0], &centroid);
        let c1 = vector::cosine(&points[1], &centroid);
        let expected = if c1 > c0 { 1 } else { 0 };
        assert_eq!(representative(&points, &[0, 1], &centroid), expected);
        assert_eq!(representative(&points, &[1], &centroid), 1);
    }

    #[test]
    fn representative_tie_goes_to_first_member() {
        let points = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(representative(&points, &[0, 1], &[0.5, 0.5]), 0);
    }

    #[test]
    fn build_uses_member_embedding_not_centroid() {
        let concepts = vec![
            concept("<a>", vec![1.0, 0.0]),
            concept("<b>", vec![0.8, 0.6]),
            concept("<c>", vec![-1.0, 0.0]),
        ];
        let d = build_dictionary(&concepts, 2, 5, &refs(2)).unwrap();
        assert_eq!(d.entries.len(), 2);
        for e in &d.entries {
            assert!(concepts.iter().any(|c| c.concept_embedding == e.embedding));
            assert!(e.member_ids.contains(&e.representative_id));
        }
        d.validate().unwrap();
    }

    #[test]
    fn missing_adapter_ref() {
        let concepts = vec![concept("<a>", vec![1.0, 0.0]), concept("<b>", vec![0.0, 1.0])];
        let mut r = refs(2);
        r.remove(&1);
        assert!(matches!(
            build_dictionary(&concepts, 2, 0, &r),
            Err(DictionaryError::MissingAdapterRef(1))
        ));
        assert!(matches!(
            build_dictionary(&concepts, 3, 0, &refs(3)),
            Err(DictionaryError::Cluster(ClusterError::TooFewPoints { .. }))
        ));
    }

    #[test]
    fn identity_query_scores_one() {
        let dict = vec![meta(0, vec![1.0, 0.0]), meta(1, vec![0.0, 1.0]), meta(2, vec![1.0, 1.0])];
        let sel = select_adapters(&dict[2].embedding, &dict, 1).unwrap();
        assert_eq!(sel.chosen[0].index, 2);
        assert!((sel.chosen[0].score - 1.0).abs() < 1e-12);
        assert_eq!(sel.chosen[0].weight, 1.0);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let dict = vec![meta(0, vec![0.0, 1.0]), meta(1, vec![1.0, 0.0]), meta(2, vec![1.0, 0.0])];
        let sel = select_adapters(&[1.0, 0.0], &dict, 1).unwrap();
        assert_eq!(sel.chosen[0].index, 1);
        let sel = select_adapters(&[1.0, 0.0], &dict, 2).unwrap();
        assert_eq!(sel.chosen.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn selection_errors_and_truncation() {
        assert!(matches!(select_adapters(&[1.0], &[], 1), Err(DictionaryError::EmptyDictionary)));
        let dict = vec![meta(0, vec![1.0, 0.0])];
        assert!(matches!(select_adapters(&[1.0, 0.0], &dict, 0), Err(DictionaryError::ZeroTopK)));
        assert!(matches!(
            select_adapters(&[1.0, 0.0, 0.0], &dict, 1),
            Err(DictionaryError::DimensionMismatch { .. })
        ));
        let sel = select_adapters(&[1.0, 0.0], &dict, 5).unwrap();
        assert_eq!(sel.chosen.len(), 1);
        assert_eq!(sel.chosen[0].weight, 1.0);
    }

    #[test]
    fn fusion_manifest_weights() {
        let dict: Vec<MetaConcept> = (0..10)
            .map(|i| meta(i, vec![(i as f64 * 0.4).cos(), (i as f64 * 0.4).sin()]))
            .collect();
        let one = fusion_manifest(&select_adapters(&[1.0, 0.0], &dict, 1).unwrap()).unwrap();
        assert_eq!(one.adapters.len(), 1);
        assert_eq!(one.adapters[0].weight, 1.0);
        let two = fusion_manifest(&select_adapters(&[1.0, 0.0], &dict, 2).unwrap()).unwrap();
        assert!(two.adapters.iter().all(|a| a.weight == 0.5));

        let sel = select_adapters(&[0.3, 0.9], &dict, 5).unwrap();
        let five = fusion_manifest(&sel).unwrap();
        assert!(five.adapters.iter().all(|a| a.weight == 0.2));
        // independent ordering oracle: re-sort all scores
        let mut oracle: Vec<(usize, f64)> = dict
            .iter()
            .map(|m| (m.index, vector::cosine(&[0.3, 0.9], &m.embedding)))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expected: Vec<String> = oracle[..5].iter().map(|(i, _)| format!("metac-{i}")).collect();
        let got: Vec<String> = five.adapters.iter().map(|a| a.adapter_ref.clone()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn adapter_ref_files() {
        let m = parse_adapter_refs(r#"{"0": "a", "1": "b"}"#).unwrap();
        assert_eq!(m[&1], "b");
        let m = parse_adapter_refs(r#"["x", "y"]"#).unwrap();
        assert_eq!(m[&0], "x");
        assert!(parse_adapter_refs(r#"{"zero": "a"}"#).is_err());
    }

    #[test]
    fn load_validates() {
        let d = Dictionary {
            k: 1,
            embedding_dimension: 2,
            seed: 0,
            entries: vec![meta(0, vec![1.0, 0.0])],
        };
        let mut doc: serde_json::Value = serde_json::from_str(&d.to_json().unwrap()).unwrap();
        assert_eq!(doc["format_version"], 1);
        doc["entries"][0]["embedding"] = serde_json::json!([2.0, 0.0]);
        assert!(Dictionary::from_json(&doc.to_string()).is_err());
    }
}
