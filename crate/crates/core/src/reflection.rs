//! Test-time reflection by the large model.
//!
//! For every concept the small model reported as present, the large model answers two yes/no
//! questions built from the concept's identity phrase and the reported locations:
//!
//! * Q1: is the concept at the reported absolute location?
//! * Q2: does the reported relative location hold?
//!
//! The answers then update the cue, checked in order:
//!
//! | a1  | a2  | result                                   |
//! |-----|-----|------------------------------------------|
//! | no  | no  | presence revoked, locations cleared      |
//! | no  | yes | absolute location cleared                |
//! | yes | no  | relative location cleared                |
//! | yes | yes | cue unchanged                            |
//!
//! Reflection only ever clears fields; it never marks an absent concept present.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backends::{BackendError, ChatBackend, ChatRequest, ChatTurn};
use crate::detection::{lookup, Cue, CueReport, Query};
use crate::json_extract;
use crate::prompts;
use crate::registry::{Concept, ConceptId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReflectionError {
    #[error("cue is not marked present")]
    NotDetected,
    #[error("scenario has no concepts")]
    EmptyScenario,
    #[error("no JSON object found in identity-extraction reply")]
    Unparseable,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Identity phrase and mutable traits extracted from a concept description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub category: String,
    pub attributes: String,
}

impl Identity {
    /// Used when extraction produced nothing usable for a concept.
    pub fn fallback(concept: &Concept) -> Self {
        Self {
            category: concept.description.clone(),
            attributes: String::new(),
        }
    }
}

pub type IdentityTable = BTreeMap<ConceptId, Identity>;

/// Fallback identities for every concept.
pub fn fallback_identities(concepts: &[Concept]) -> IdentityTable {
    concepts
        .iter()
        .map(|c| (c.id.clone(), Identity::fallback(c)))
        .collect()
}

/// Returns `(system, user)` prompts for identity extraction.
pub fn render_identity_prompt(concepts: &[Concept]) -> Result<(String, String), ReflectionError> {
    if concepts.is_empty() {
        return Err(ReflectionError::EmptyScenario);
    }
    Ok((prompts::IDENTITY_SYSTEM.to_string(), prompts::concept_list(concepts)))
}

/// Parses an identity-extraction reply. Concepts missing or malformed in the reply get
/// [`Identity::fallback`].
pub fn parse_identities(raw_reply: &str, concepts: &[Concept]) -> Result<IdentityTable, ReflectionError> {
    let obj = json_extract::extract_object(raw_reply).ok_or(ReflectionError::Unparseable)?;
    Ok(concepts
        .iter()
        .map(|c| {
            let parsed = lookup(&obj, &c.id).and_then(|v| {
                let category = v.get("category")?.as_str()?.trim();
                if category.is_empty() {
                    return None;
                }
                let attributes = v.get("attributes").and_then(|a| a.as_str()).unwrap_or("").trim();
                Some(Identity {
                    category: category.to_string(),
                    attributes: attributes.to_string(),
                })
            });
            let identity = parsed.unwrap_or_else(|| {
                warn!(id = %c.id, "identity extraction missed concept; using its description");
                Identity::fallback(c)
            });
            (c.id.clone(), identity)
        })
        .collect())
}

pub fn extract_identities(concepts: &[Concept], large: &dyn ChatBackend) -> Result<IdentityTable, ReflectionError> {
    let (system, user) = render_identity_prompt(concepts)?;
    let reply = large.chat(&ChatRequest::new(vec![ChatTurn::system(system), ChatTurn::user(user)]))?;
    parse_identities(&reply, concepts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

impl fmt::Display for YesNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            YesNo::Yes => "yes",
            YesNo::No => "no",
        })
    }
}

/// Verification questions for one present cue. A question is omitted when its location is
/// missing; its answer then counts as yes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationQuestions {
    pub q1: Option<String>,
    pub q2: Option<String>,
}

impl VerificationQuestions {
    pub fn asked(&self) -> Vec<String> {
        self.q1.iter().chain(self.q2.iter()).cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.q1.is_none() && self.q2.is_none()
    }
}

pub fn render_verification_questions(identity: &Identity, cue: &Cue) -> Result<VerificationQuestions, ReflectionError> {
    if !cue.present {
        return Err(ReflectionError::NotDetected);
    }
    Ok(VerificationQuestions {
        q1: cue
            .loc_abs
            .as_deref()
            .map(|loc| prompts::verification_absolute(&identity.category, loc)),
        q2: cue
            .loc_rel
            .as_deref()
            .map(|loc| prompts::verification_relative(&identity.category, loc)),
    })
}

/// Scans `raw` for `yes`/`no` tokens (case-insensitive, punctuation ignored), returning exactly
/// `expected_count` answers. Missing positions default to yes; extra tokens are ignored.
pub fn parse_yes_no(raw: &str, expected_count: usize) -> Vec<YesNo> {
    let mut answers: Vec<YesNo> = raw
        .split(|c: char| !c.is_alphanumeric())
        .filter_map(|tok| match tok.to_lowercase().as_str() {
            "yes" => Some(YesNo::Yes),
            "no" => Some(YesNo::No),
            _ => None,
        })
        .take(expected_count)
        .collect();
    answers.resize(expected_count, YesNo::Yes);
    answers
}

/// Applies the verification answers to a present cue.
pub fn apply_update_rule(cue: &Cue, a1: YesNo, a2: YesNo) -> Result<Cue, ReflectionError> {
    if !cue.present {
        return Err(ReflectionError::NotDetected);
    }
    Ok(match (a1, a2) {
        (YesNo::No, YesNo::No) => Cue::absent(),
        _ => Cue {
            present: true,
            loc_abs: if a1 == YesNo::No { None } else { cue.loc_abs.clone() },
            loc_rel: if a2 == YesNo::No { None } else { cue.loc_rel.clone() },
        },
    })
}

/// Which branch of the update rule (or which bypass) produced a verified cue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedCase {
    /// Not reported present; passed through.
    NotDetected,
    /// Both answers no: presence revoked.
    Revoked,
    /// a1 = no: absolute location cleared.
    ClearedAbsolute,
    /// a2 = no: relative location cleared.
    ClearedRelative,
    /// Both answers yes.
    Confirmed,
    /// Present but no location phrase to ask about.
    Unverifiable,
    /// The verification call failed; cue kept.
    BackendFailure,
    /// Reflection disabled; raw cue forwarded.
    Skipped,
    /// Presence checked by the large model alone (no detector cues).
    PresenceChecked,
}

impl AppliedCase {
    pub fn from_answers(a1: YesNo, a2: YesNo) -> Self {
        match (a1, a2) {
            (YesNo::No, YesNo::No) => AppliedCase::Revoked,
            (YesNo::No, YesNo::Yes) => AppliedCase::ClearedAbsolute,
            (YesNo::Yes, YesNo::No) => AppliedCase::ClearedRelative,
            (YesNo::Yes, YesNo::Yes) => AppliedCase::Confirmed,
        }
    }
}

/// Raw verification reply and the two effective answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationAnswers {
    pub a1: YesNo,
    pub a2: YesNo,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAudit {
    pub input: Cue,
    pub output: Cue,
    pub case: AppliedCase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<Identity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub questions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<VerificationAnswers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ConceptAudit {
    fn passthrough(cue: &Cue, case: AppliedCase, note: Option<String>) -> Self {
        Self {
            input: cue.clone(),
            output: cue.clone(),
            case,
            identity: None,
            questions: Vec::new(),
            answers: None,
            note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifiedCueReport {
    pub turn_index: u32,
    pub cues: BTreeMap<ConceptId, Cue>,
    pub audit: BTreeMap<ConceptId, ConceptAudit>,
}

impl VerifiedCueReport {
    /// Forwards raw cues unchanged, as when reflection is disabled.
    pub fn unverified(report: &CueReport) -> Self {
        Self {
            turn_index: report.turn_index,
            cues: report.cues.clone(),
            audit: report
                .cues
                .iter()
                .map(|(id, cue)| {
                    (id.clone(), ConceptAudit::passthrough(cue, AppliedCase::Skipped, None))
                })
                .collect(),
        }
    }

    pub fn suppressed(&self) -> Vec<&ConceptId> {
        self.audit
            .iter()
            .filter(|(_, a)| a.case == AppliedCase::Revoked)
            .map(|(id, _)| id)
            .collect()
    }
}

fn identity_for(id: &ConceptId, concepts: &[Concept], identities: &IdentityTable) -> Identity {
    identities.get(id).cloned().unwrap_or_else(|| {
        concepts
            .iter()
            .find(|c| &c.id == id)
            .map(Identity::fallback)
            .unwrap_or_else(|| Identity {
                category: id.to_string(),
                attributes: String::new(),
            })
    })
}

/// Verifies every present cue with one large-model call carrying its questions. Failed calls
/// keep the cue and record the failure in the audit.
pub fn reflect(
    report: &CueReport,
    concepts: &[Concept],
    identities: &IdentityTable,
    large: &dyn ChatBackend,
    query: &Query,
) -> VerifiedCueReport {
    let mut cues = BTreeMap::new();
    let mut audit = BTreeMap::new();
    for (id, cue) in &report.cues {
        let entry = if !cue.present {
            ConceptAudit::passthrough(cue, AppliedCase::NotDetected, None)
        } else {
            verify_one(cue, identity_for(id, concepts, identities), large, query)
        };
        cues.insert(id.clone(), entry.output.clone());
        audit.insert(id.clone(), entry);
    }
    VerifiedCueReport {
        turn_index: report.turn_index,
        cues,
        audit,
    }
}

fn verify_one(cue: &Cue, identity: Identity, large: &dyn ChatBackend, query: &Query) -> ConceptAudit {
    let questions = render_verification_questions(&identity, cue).expect("cue is present");
    if questions.is_empty() {
        let mut a = ConceptAudit::passthrough(
            cue,
            AppliedCase::Unverifiable,
            Some("no location phrases to verify".into()),
        );
        a.identity = Some(identity);
        return a;
    }
    let asked = questions.asked();
    let request = ChatRequest::new(vec![
        ChatTurn::system(prompts::REFLECTION_SYSTEM),
        ChatTurn::user_with_image(prompts::reflection_user(&asked), query.image.clone()),
    ]);
    let raw = match large.chat(&request) {
        Ok(raw) => raw,
        Err(e) => {
            warn!(error = %e, "verification call failed; keeping cue");
            let mut a = ConceptAudit::passthrough(cue, AppliedCase::BackendFailure, Some(e.to_string()));
            a.identity = Some(identity);
            a.questions = asked;
            return a;
        }
    };
    let mut parsed = parse_yes_no(&raw, asked.len()).into_iter();
    let a1 = if questions.q1.is_some() { parsed.next().unwrap() } else { YesNo::Yes };
    let a2 = if questions.q2.is_some() { parsed.next().unwrap() } else { YesNo::Yes };
    let output = apply_update_rule(cue, a1, a2).expect("cue is present");
    ConceptAudit {
        input: cue.clone(),
        output,
        case: AppliedCase::from_answers(a1, a2),
        identity: Some(identity),
        questions: asked,
        answers: Some(VerificationAnswers { a1, a2, raw }),
        note: None,
    }
}

/// Detector-free variant: the large model is asked only whether each concept is visible.
/// Every concept costs one call; a failed call marks the concept absent.
pub fn presence_check(
    concepts: &[Concept],
    identities: &IdentityTable,
    large: &dyn ChatBackend,
    query: &Query,
) -> VerifiedCueReport {
    let mut cues = BTreeMap::new();
    let mut audit = BTreeMap::new();
    for c in concepts {
        let identity = identity_for(&c.id, concepts, identities);
        let question = prompts::verification_presence(&identity.category);
        let request = ChatRequest::new(vec![
            ChatTurn::system(prompts::REFLECTION_SYSTEM),
            ChatTurn::user_with_image(prompts::reflection_user(std::slice::from_ref(&question)), query.image.clone()),
        ]);
        let (output, answers, note) = match large.chat(&request) {
            Ok(raw) => {
                let a = parse_yes_no(&raw, 1)[0];
                let cue = if a == YesNo::Yes { Cue::present(None, None) } else { Cue::absent() };
                (cue, Some(VerificationAnswers { a1: a, a2: YesNo::Yes, raw }), None)
            }
            Err(e) => (Cue::absent(), None, Some(e.to_string())),
        };
        audit.insert(
            c.id.clone(),
            ConceptAudit {
                input: Cue::absent(),
                output: output.clone(),
                case: AppliedCase::PresenceChecked,
                identity: Some(identity),
                questions: vec![question],
                answers,
                note,
            },
        );
        cues.insert(c.id.clone(), output);
    }
    VerifiedCueReport {
        turn_index: query.turn_index,
        cues,
        audit,
    }
}
