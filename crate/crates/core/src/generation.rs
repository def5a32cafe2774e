//! Answer generation by the large model.
//!
//! The verified cues and the extracted identities are fused into a Detection Report, injected
//! into the answer system prompt, and sent with the image and the raw question. Unverified cues
//! never reach this stage. The text-only path skips the image and prepends the identities'
//! category and attribute fields to the question instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatRequest, ChatTurn};
use crate::detection::{Query, KEY_LOCATION_ABSOLUTE, KEY_LOCATION_RELATIVE, KEY_PRESENT};
use crate::prompts::{self, quoted};
use crate::reflection::{ConceptAudit, Identity, IdentityTable, VerifiedCueReport};
use crate::registry::{Concept, ConceptId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("large model returned an empty answer")]
    EmptyAnswer,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One Detection Report line. Absent concepts carry only `present = false`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub id: ConceptId,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_abs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_rel: Option<String>,
}

impl ReportEntry {
    /// `<id>: {...}` as it appears in the prompt. Cleared locations render as `""`.
    pub fn render(&self) -> String {
        if !self.present {
            return format!("{}: {{{}: false}}", self.id, quoted(KEY_PRESENT));
        }
        let field = |v: &Option<String>| quoted(v.as_deref().unwrap_or(""));
        format!(
            "{}: {{{}: true, \"category\": {}, \"attributes\": {}, {}: {}, {}: {}}}",
            self.id,
            quoted(KEY_PRESENT),
            field(&self.category),
            field(&self.attributes),
            quoted(KEY_LOCATION_ABSOLUTE),
            field(&self.loc_abs),
            quoted(KEY_LOCATION_RELATIVE),
            field(&self.loc_rel),
        )
    }
}

/// Per-concept context for the answer prompt, in registration order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DetectionReportContext {
    pub entries: Vec<ReportEntry>,
}

impl DetectionReportContext {
    /// Fuses verified cues with identities. Concepts missing from `verified` count as absent.
    pub fn build(concepts: &[Concept], verified: &VerifiedCueReport, identities: &IdentityTable) -> Self {
        let entries = concepts
            .iter()
            .map(|c| match verified.cues.get(&c.id) {
                Some(cue) if cue.present => {
                    let identity = identities.get(&c.id).cloned().unwrap_or_else(|| Identity::fallback(c));
                    ReportEntry {
                        id: c.id.clone(),
                        present: true,
                        category: Some(identity.category),
                        attributes: Some(identity.attributes),
                        loc_abs: cue.loc_abs.clone(),
                        loc_rel: cue.loc_rel.clone(),
                    }
                }
                _ => ReportEntry {
                    id: c.id.clone(),
                    present: false,
                    category: None,
                    attributes: None,
                    loc_abs: None,
                    loc_rel: None,
                },
            })
            .collect();
        Self { entries }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(ReportEntry::render).collect::<Vec<_>>().join("\n")
    }

    pub fn get(&self, id: &ConceptId) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| &e.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub context: DetectionReportContext,
    #[serde(default)]
    pub audit: BTreeMap<ConceptId, ConceptAudit>,
}

/// Returns `(system, user)`: the answer template around the report, and the raw question.
pub fn render_answer_prompt(context: &DetectionReportContext, question: &str) -> (String, String) {
    (prompts::answer_system(&context.render()), question.to_string())
}

fn finish(reply: String) -> Result<String, GenerationError> {
    if reply.trim().is_empty() {
        return Err(GenerationError::EmptyAnswer);
    }
    Ok(reply)
}

/// One large-model call with the image and the rendered Detection Report.
pub fn answer(
    query: &Query,
    concepts: &[Concept],
    verified: &VerifiedCueReport,
    identities: &IdentityTable,
    large: &dyn ChatBackend,
) -> Result<Answer, GenerationError> {
    let context = DetectionReportContext::build(concepts, verified, identities);
    let (system, user) = render_answer_prompt(&context, &query.question);
    let request = ChatRequest::new(vec![
        ChatTurn::system(system),
        ChatTurn::user_with_image(user, query.image.clone()),
    ]);
    let text = finish(large.chat(&request)?)?;
    Ok(Answer {
        text,
        context,
        audit: verified.audit.clone(),
    })
}

/// `<id>: {"category": ..., "attributes": ...}` lines for the text-only prompt.
pub fn identity_lines(concepts: &[Concept], identities: &IdentityTable) -> Vec<String> {
    concepts
        .iter()
        .map(|c| {
            let identity = identities.get(&c.id).cloned().unwrap_or_else(|| Identity::fallback(c));
            format!(
                "{}: {{\"category\": {}, \"attributes\": {}}}",
                c.id,
                quoted(&identity.category),
                quoted(&identity.attributes)
            )
        })
        .collect()
}

pub fn render_text_only_prompt(question: &str, concepts: &[Concept], identities: &IdentityTable) -> String {
    prompts::context_then_question(prompts::CONCEPT_INFO_HEADER, &identity_lines(concepts, identities), question)
}

/// Text-only protocol: identity fields plus the question, no image, one call.
pub fn answer_text_only(
    question: &str,
    concepts: &[Concept],
    identities: &IdentityTable,
    large: &dyn ChatBackend,
) -> Result<Answer, GenerationError> {
    if question.trim().is_empty() {
        return Err(GenerationError::EmptyQuestion);
    }
    let prompt = render_text_only_prompt(question, concepts, identities);
    let text = finish(large.chat(&ChatRequest::new(vec![ChatTurn::user(prompt)]))?)?;
    Ok(Answer {
        text,
        context: DetectionReportContext::default(),
        audit: BTreeMap::new(),
    })
}

/// Baseline without the small model or reflection: concept descriptions, the question and the
/// image go straight to the large model.
pub fn answer_baseline(query: &Query, concepts: &[Concept], large: &dyn ChatBackend) -> Result<Answer, GenerationError> {
    let lines: Vec<String> = concepts.iter().map(|c| format!("{}: {}", c.id, c.description)).collect();
    let prompt = prompts::context_then_question(prompts::CONCEPT_LIST_HEADER, &lines, &query.question);
    let request = ChatRequest::new(vec![ChatTurn::user_with_image(prompt, query.image.clone())]);
    let text = finish(large.chat(&request)?)?;
    Ok(Answer {
        text,
        context: DetectionReportContext::default(),
        audit: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ImageRef, ScriptRule, ScriptedBackend, ScriptedBehavior};
    use crate::detection::{Cue, CueReport};

    fn concepts() -> Vec<Concept> {
        vec![
            Concept::new(
                ConceptId::new("<bo>").unwrap(),
                "<bo> is a cute golden retriever puppy with a playful expression.",
                vec![vec![1.0, 0.0]],
            )
            .unwrap(),
            Concept::new(ConceptId::new("<lina>").unwrap(), "<lina> is a young woman.", vec![vec![0.0, 1.0]]).unwrap(),
        ]
    }

    fn identities(cs: &[Concept]) -> IdentityTable {
        [(
            cs[0].id.clone(),
            Identity {
                category: "a golden retriever puppy".into(),
                attributes: "always playful expression".into(),
            },
        )]
        .into_iter()
        .collect()
    }

    fn verified(cs: &[Concept], bo: Cue) -> VerifiedCueReport {
        let ids: Vec<_> = cs.iter().map(|c| c.id.clone()).collect();
        let mut report = CueReport::all_absent(&ids, 0);
        report.cues.insert(ids[0].clone(), bo);
        VerifiedCueReport::unverified(&report)
    }

    #[test]
    fn report_lines() {
        let cs = concepts();
        let ctx = DetectionReportContext::build(
            &cs,
            &verified(&cs, Cue::present(Some("center"), Some("behind the car"))),
            &identities(&cs),
        );
        let (system, user) = render_answer_prompt(&ctx, "Is <bo> here?");
        assert!(system.starts_with("Detection Report\n<bo>: {\"present\": true, \"category\": \"a golden retriever puppy\""));
        assert!(system.contains("\"location-absolute\": \"center\", \"location-relative\": \"behind the car\"}"));
        assert!(system.contains("\n<lina>: {\"present\": false}\n\nRules\n"));
        assert_eq!(user, "Is <bo> here?");
    }

    #[test]
    fn cleared_location_renders_empty() {
        let cs = concepts();
        let ctx = DetectionReportContext::build(&cs, &verified(&cs, Cue::present(None, Some("left"))), &identities(&cs));
        assert!(ctx.entries[0].render().contains("\"location-absolute\": \"\""));
    }

    #[test]
    fn missing_identity_falls_back_to_description() {
        let cs = concepts();
        let mut v = verified(&cs, Cue::absent());
        v.cues.insert(cs[1].id.clone(), Cue::present(Some("left"), None));
        let ctx = DetectionReportContext::build(&cs, &v, &identities(&cs));
        assert_eq!(ctx.entries[1].category.as_deref(), Some("<lina> is a young woman."));
        assert_eq!(ctx.entries[1].attributes.as_deref(), Some(""));
    }

    #[test]
    fn answer_sends_image_and_report() {
        let cs = concepts();
        let large = ScriptedBackend::new(
            ScriptedBehavior::new("I am not sure.").rule(ScriptRule::reply_when(&["<bo>: {\"present\": true"], "yes")),
        );
        let query = Query::new(ImageRef::parse("park.jpg"), "Is <bo> in the image? yes/no").unwrap();
        let a = answer(&query, &cs, &verified(&cs, Cue::present(Some("center"), None)), &identities(&cs), &large).unwrap();
        assert_eq!(a.text, "yes");
        assert_eq!(large.call_count(), 1);
        let call = &large.calls()[0];
        assert_eq!(call.turns[1].images, vec![ImageRef::parse("park.jpg")]);
        assert!(call.adapter_ref.is_none());
    }

    #[test]
    fn empty_answer_is_an_error() {
        let cs = concepts();
        let large = ScriptedBackend::constant("  ");
        let query = Query::new(ImageRef::parse("park.jpg"), "q").unwrap();
        assert_eq!(
            answer(&query, &cs, &verified(&cs, Cue::absent()), &identities(&cs), &large),
            Err(GenerationError::EmptyAnswer)
        );
    }

    #[test]
    fn text_only_prompt() {
        let cs = concepts();
        let prompt = render_text_only_prompt("What breed is <bo>?", &cs, &identities(&cs));
        assert_eq!(
            prompt,
            "Concept Information\n\
             <bo>: {\"category\": \"a golden retriever puppy\", \"attributes\": \"always playful expression\"}\n\
             <lina>: {\"category\": \"<lina> is a young woman.\", \"attributes\": \"\"}\n\
             \n\
             What breed is <bo>?"
        );
        assert_eq!(render_text_only_prompt("why?", &[], &IdentityTable::new()), "why?");

        let large = ScriptedBackend::constant("a golden retriever");
        let a = answer_text_only("What breed is <bo>?", &cs, &identities(&cs), &large).unwrap();
        assert_eq!(a.text, "a golden retriever");
        assert!(large.calls()[0].images().next().is_none());
        assert_eq!(answer_text_only(" ", &cs, &identities(&cs), &large), Err(GenerationError::EmptyQuestion));
    }

    #[test]
    fn baseline_uses_descriptions() {
        let cs = concepts();
        let large = ScriptedBackend::constant("no");
        let query = Query::new(ImageRef::parse("park.jpg"), "Is <lina> here?").unwrap();
        answer_baseline(&query, &cs, &large).unwrap();
        let text = &large.calls()[0].turns[0].text;
        assert!(text.starts_with("Concept List\n<bo>: <bo> is a cute golden retriever puppy"));
        assert!(text.ends_with("\n\nIs <lina> here?"));
    }
}
