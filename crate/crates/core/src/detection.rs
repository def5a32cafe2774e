//! Concept detection by the small model.
//!
//! The small model, with the selected meta-adapter active, receives the detection prompt and
//! the query image and replies with one JSON object holding a presence flag and two location
//! phrases per concept. Parsing is lenient about the envelope and strict about the result:
//! every expected concept gets exactly one [`Cue`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::warn;

use crate::backends::{BackendError, ChatBackend, ChatRequest, ChatTurn, ImageRef};
use crate::dictionary::SelectionResult;
use crate::json_extract;
use crate::prompts;
use crate::registry::{Concept, ConceptId, Scenario};

pub const KEY_PRESENT: &str = "present";
pub const KEY_LOCATION_ABSOLUTE: &str = "location-absolute";
pub const KEY_LOCATION_RELATIVE: &str = "location-relative";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("scenario has no concepts")]
    EmptyScenario,
    #[error("no JSON object found in detector reply")]
    Unparseable,
    #[error("`present` for {0} is not a boolean")]
    InvalidPresent(String),
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Per-concept detection triple.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cue {
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_abs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_rel: Option<String>,
}

impl Cue {
    pub fn absent() -> Self {
        Self::default()
    }

    pub fn present(loc_abs: Option<&str>, loc_rel: Option<&str>) -> Self {
        Self {
            present: true,
            loc_abs: loc_abs.map(str::to_string),
            loc_rel: loc_rel.map(str::to_string),
        }
    }

    /// Drops location phrases on absent cues and turns blank phrases into `None`.
    pub fn normalized(mut self) -> Self {
        if !self.present {
            return Self::absent();
        }
        let clean = |s: Option<String>| s.filter(|v| !v.trim().is_empty());
        self.loc_abs = clean(self.loc_abs);
        self.loc_rel = clean(self.loc_rel);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CueReport {
    pub turn_index: u32,
    pub cues: BTreeMap<ConceptId, Cue>,
}

impl CueReport {
    /// Every concept in `ids` marked absent.
    pub fn all_absent(ids: &[ConceptId], turn_index: u32) -> Self {
        Self {
            turn_index,
            cues: ids.iter().map(|id| (id.clone(), Cue::absent())).collect(),
        }
    }

    pub fn get(&self, id: &ConceptId) -> Option<&Cue> {
        self.cues.get(id)
    }

    pub fn present_count(&self) -> usize {
        self.cues.values().filter(|c| c.present).count()
    }
}

/// An image-question pair for one dialogue turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub image: ImageRef,
    pub question: String,
    #[serde(default)]
    pub turn_index: u32,
}

impl Query {
    pub fn new(image: ImageRef, question: impl Into<String>) -> Result<Self, DetectionError> {
        let question = question.into();
        if question.trim().is_empty() {
            return Err(DetectionError::EmptyQuestion);
        }
        Ok(Self {
            image,
            question,
            turn_index: 0,
        })
    }

    pub fn at_turn(mut self, turn_index: u32) -> Self {
        self.turn_index = turn_index;
        self
    }
}

/// Returns `(system, user)` detection prompts for `concepts` in the given order.
pub fn render_detection_prompt(concepts: &[Concept]) -> Result<(String, String), DetectionError> {
    if concepts.is_empty() {
        return Err(DetectionError::EmptyScenario);
    }
    Ok((prompts::DETECTION_SYSTEM.to_string(), prompts::concept_list(concepts)))
}

/// Looks up a concept entry, accepting the id with or without its angle brackets.
pub(crate) fn lookup<'a>(obj: &'a Map<String, Value>, id: &ConceptId) -> Option<&'a Value> {
    obj.get(id.as_str()).or_else(|| {
        let bare = id.as_str().trim_start_matches('<').trim_end_matches('>');
        obj.get(bare)
    })
}

fn coerce_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

fn string_field(entry: &Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter()
        .find_map(|k| entry.get(*k))
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn parse_cue(id: &ConceptId, value: &Value) -> Result<Cue, DetectionError> {
    let cue = match value {
        Value::Object(entry) => {
            let present = entry
                .get(KEY_PRESENT)
                .and_then(coerce_bool)
                .ok_or_else(|| DetectionError::InvalidPresent(id.to_string()))?;
            Cue {
                present,
                loc_abs: string_field(entry, &[KEY_LOCATION_ABSOLUTE, "location_absolute", "loc_abs"]),
                loc_rel: string_field(entry, &[KEY_LOCATION_RELATIVE, "location_relative", "loc_rel"]),
            }
        }
        other => Cue {
            present: coerce_bool(other).ok_or_else(|| DetectionError::InvalidPresent(id.to_string()))?,
            ..Cue::default()
        },
    };
    Ok(cue.normalized())
}

/// Parses the detector reply into a complete report over `expected_ids`.
///
/// Concepts missing from the reply are marked absent. Unknown ids are ignored.
pub fn parse_cue_report(raw_reply: &str, expected_ids: &[ConceptId]) -> Result<CueReport, DetectionError> {
    if expected_ids.is_empty() {
        return Err(DetectionError::EmptyScenario);
    }
    let obj = json_extract::extract_object(raw_reply).ok_or(DetectionError::Unparseable)?;
    let mut cues = BTreeMap::new();
    for id in expected_ids {
        let cue = match lookup(&obj, id) {
            Some(v) => parse_cue(id, v)?,
            None => Cue::absent(),
        };
        cues.insert(id.clone(), cue);
    }
    for key in obj.keys() {
        let known = expected_ids.iter().any(|id| {
            id.as_str() == key || id.as_str().trim_start_matches('<').trim_end_matches('>') == key
        });
        if !known {
            warn!(key = %key, "detector reported an unknown concept id");
        }
    }
    Ok(CueReport { turn_index: 0, cues })
}

/// Prompts, raw reply and parsed report of one detection call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub system_prompt: String,
    pub user_prompt: String,
    pub adapter_ref: String,
    pub raw_reply: String,
    pub report: CueReport,
}

pub fn detect(
    query: &Query,
    scenario: &Scenario,
    small: &dyn ChatBackend,
    selection: &SelectionResult,
) -> Result<CueReport, DetectionError> {
    detect_traced(query, scenario, small, selection).map(|d| d.report)
}

/// [`detect`], also returning the exchanged prompts and reply.
pub fn detect_traced(
    query: &Query,
    scenario: &Scenario,
    small: &dyn ChatBackend,
    selection: &SelectionResult,
) -> Result<Detection, DetectionError> {
    let (system_prompt, user_prompt) = render_detection_prompt(scenario.concepts())?;
    let adapter_ref = selection.adapter_ref();
    let request = ChatRequest::new(vec![
        ChatTurn::system(system_prompt.clone()),
        ChatTurn::user_with_image(user_prompt.clone(), query.image.clone()),
    ])
    .with_adapter(adapter_ref.clone());
    let raw_reply = small.chat(&request)?;
    let mut report = parse_cue_report(&raw_reply, &scenario.ids())?;
    report.turn_index = query.turn_index;
    Ok(Detection {
        system_prompt,
        user_prompt,
        adapter_ref,
        raw_reply,
        report,
    })
}
