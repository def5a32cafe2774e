//! The three-stage inference pipeline and its ablated variants.
//!
//! A [`PreparedScenario`] is computed once per scenario: adapter selection plus the identity
//! table (extracted lazily on first use and cached). Each [`Pipeline::ask`] then runs
//! detection, reflection and generation for one image-question turn and returns every
//! intermediate result alongside a transcript of the model exchanges.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::backends::{BackendError, ChatBackend, ChatRequest};
use crate::detection::{self, Cue, CueReport, DetectionError, Query};
use crate::dictionary::{Dictionary, DictionaryError, SelectionResult};
use crate::generation::{self, DetectionReportContext, GenerationError};
use crate::reflection::{self, ConceptAudit, IdentityTable, VerifiedCueReport};
use crate::registry::{Concept, ConceptId, Scenario};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("detection failed: {0}")]
    Detection(#[from] DetectionError),
    #[error("generation failed: {0}")]
    Generation(#[from] GenerationError),
    #[error("adapter selection failed: {0}")]
    Selection(#[from] DictionaryError),
}

/// Switches for the component ablations. Both on is the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub use_small: bool,
    pub use_reflection: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Self = Self {
        use_small: true,
        use_reflection: true,
    };

    /// All four combinations, full pipeline first.
    pub const GRID: [Self; 4] = [
        Self::FULL,
        Self {
            use_small: true,
            use_reflection: false,
        },
        Self {
            use_small: false,
            use_reflection: true,
        },
        Self {
            use_small: false,
            use_reflection: false,
        },
    ];

    pub fn label(self) -> &'static str {
        match (self.use_small, self.use_reflection) {
            (true, true) => "full",
            (true, false) => "no-reflection",
            (false, true) => "no-small",
            (false, false) => "large-only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detection,
    IdentityExtraction,
    Reflection,
    Generation,
}

/// One recorded model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: Stage,
    pub request: ChatRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Passes calls through to `inner`, logging each exchange under `stage`.
struct Recorder<'a> {
    inner: &'a dyn ChatBackend,
    stage: Stage,
    log: &'a Mutex<Vec<Exchange>>,
}

impl<'a> Recorder<'a> {
    fn new(inner: &'a dyn ChatBackend, stage: Stage, log: &'a Mutex<Vec<Exchange>>) -> Self {
        Self { inner, stage, log }
    }
}

impl ChatBackend for Recorder<'_> {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let result = self.inner.chat(request);
        let (reply, error) = match &result {
            Ok(r) => (Some(r.clone()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.log.lock().unwrap().push(Exchange {
            stage: self.stage,
            request: request.clone(),
            reply,
            error,
        });
        result
    }
}

/// Selection and identities for one scenario.
#[derive(Debug)]
pub struct PreparedScenario {
    scenario: Scenario,
    selection: SelectionResult,
    identities: OnceLock<IdentityTable>,
    identity_log: Mutex<Vec<Exchange>>,
}

impl PreparedScenario {
    pub fn new(scenario: Scenario, dictionary: &Dictionary, top_k: usize) -> Result<Self, PipelineError> {
        let selection = dictionary.select(scenario.embedding(), top_k)?;
        debug!(adapter = %selection.adapter_ref(), score = selection.primary().score, "selected adapter");
        Ok(Self {
            scenario,
            selection,
            identities: OnceLock::new(),
            identity_log: Mutex::new(Vec::new()),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn concepts(&self) -> &[Concept] {
        self.scenario.concepts()
    }

    pub fn selection(&self) -> &SelectionResult {
        &self.selection
    }

    /// Identity table, extracted with `large` on first call. Extraction failures fall back to
    /// the concept descriptions.
    pub fn identities(&self, large: &dyn ChatBackend) -> &IdentityTable {
        self.identities.get_or_init(|| {
            let recorder = Recorder::new(large, Stage::IdentityExtraction, &self.identity_log);
            reflection::extract_identities(self.concepts(), &recorder).unwrap_or_else(|e| {
                warn!(error = %e, "identity extraction failed; using descriptions");
                reflection::fallback_identities(self.concepts())
            })
        })
    }

    /// The identity-extraction exchange, once it has happened.
    pub fn identity_transcript(&self) -> Vec<Exchange> {
        self.identity_log.lock().unwrap().clone()
    }
}

/// Everything one turn produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub answer: String,
    pub ablation: Ablation,
    /// Adapter selection; absent when the small model is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<SelectionResult>,
    /// Raw detector cues; absent when the small model is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cues: Option<CueReport>,
    pub verified_cues: BTreeMap<ConceptId, Cue>,
    pub audit: BTreeMap<ConceptId, ConceptAudit>,
    pub context: DetectionReportContext,
    pub transcript: Vec<Exchange>,
}

impl TurnResult {
    /// Concepts whose presence reflection revoked.
    pub fn suppressed(&self) -> Vec<&ConceptId> {
        self.audit
            .iter()
            .filter(|(_, a)| a.case == reflection::AppliedCase::Revoked)
            .map(|(id, _)| id)
            .collect()
    }
}

#[derive(Clone)]
pub struct Pipeline {
    small: Arc<dyn ChatBackend>,
    large: Arc<dyn ChatBackend>,
}

impl Pipeline {
    pub fn new(small: Arc<dyn ChatBackend>, large: Arc<dyn ChatBackend>) -> Self {
        Self { small, large }
    }

    pub fn large(&self) -> &dyn ChatBackend {
        self.large.as_ref()
    }

    pub fn small(&self) -> &dyn ChatBackend {
        self.small.as_ref()
    }

    pub fn ask(&self, prepared: &PreparedScenario, query: &Query, ablation: Ablation) -> Result<TurnResult, PipelineError> {
        let log = Mutex::new(Vec::new());
        let concepts = prepared.concepts();
        let large_gen = Recorder::new(self.large.as_ref(), Stage::Generation, &log);

        if !ablation.use_small && !ablation.use_reflection {
            let answer = generation::answer_baseline(query, concepts, &large_gen)?;
            return Ok(TurnResult {
                answer: answer.text,
                ablation,
                adapter: None,
                cues: None,
                verified_cues: BTreeMap::new(),
                audit: BTreeMap::new(),
                context: answer.context,
                transcript: log.into_inner().unwrap(),
            });
        }

        let (cues, verified) = if ablation.use_small {
            let small = Recorder::new(self.small.as_ref(), Stage::Detection, &log);
            let report = detection::detect(query, prepared.scenario(), &small, prepared.selection())?;
            let verified = if ablation.use_reflection && report.present_count() > 0 {
                let identities = prepared.identities(self.large.as_ref());
                let large = Recorder::new(self.large.as_ref(), Stage::Reflection, &log);
                reflection::reflect(&report, concepts, identities, &large, query)
            } else {
                VerifiedCueReport::unverified(&report)
            };
            (Some(report), verified)
        } else {
            let identities = prepared.identities(self.large.as_ref());
            let large = Recorder::new(self.large.as_ref(), Stage::Reflection, &log);
            (None, reflection::presence_check(concepts, identities, &large, query))
        };

        let answer = generation::answer(query, concepts, &verified, prepared.identities(self.large.as_ref()), &large_gen)?;
        Ok(TurnResult {
            answer: answer.text,
            ablation,
            adapter: ablation.use_small.then(|| prepared.selection().clone()),
            cues,
            verified_cues: verified.cues,
            audit: verified.audit,
            context: answer.context,
            transcript: log.into_inner().unwrap(),
        })
    }

    /// Text-only question: identity fields plus the question, one large-model call.
    pub fn ask_text(&self, prepared: &PreparedScenario, question: &str) -> Result<(String, Vec<Exchange>), PipelineError> {
        let identities = prepared.identities(self.large.as_ref());
        let log = Mutex::new(Vec::new());
        let large = Recorder::new(self.large.as_ref(), Stage::Generation, &log);
        let answer = generation::answer_text_only(question, prepared.concepts(), identities, &large)?;
        Ok((answer.text, log.into_inner().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ImageRef, ScriptRule, ScriptedBackend, ScriptedBehavior, ScriptedError};
    use crate::dictionary::build_dictionary;
    use crate::registry::Registry;

    fn setup() -> (Registry, Dictionary) {
        let mut reg = Registry::new();
        reg.register_concept("<bo>", "<bo> is a cute golden retriever puppy.", vec![vec![1.0, 0.0]]).unwrap();
        reg.register_concept("<ys>", "<ys> is a grey tabby cat.", vec![vec![0.0, 1.0]]).unwrap();
        let refs = [(0, "metac-0".to_string()), (1, "metac-1".to_string())].into_iter().collect();
        let dict = build_dictionary(reg.concepts(), 2, 7, &refs).unwrap();
        (reg, dict)
    }

    fn small() -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::constant(
            r#"{"<bo>": {"present": true, "location-absolute": "center", "location-relative": "on the grass"}, "<ys>": {"present": true, "location-absolute": "left", "location-relative": "next to <bo>"}}"#,
        ))
    }

    fn large() -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new(
            ScriptedBehavior::new("yes")
                .rule(ScriptRule::reply_when(&["information extractor"], r#"{"<bo>": {"category": "a golden retriever puppy", "attributes": ""}, "<ys>": {"category": "a grey tabby cat", "attributes": ""}}"#))
                .rule(ScriptRule::reply_when(&["Q1. Do you see a grey tabby cat"], "no no"))
                .rule(ScriptRule::reply_when(&["Q1."], "yes yes"))
                .rule(ScriptRule::reply_when(&["<ys>: {\"present\": false}", "Is <ys>"], "no"))
                .rule(ScriptRule::reply_when(&["Is <ys>"], "yes")),
        ))
    }

    #[test]
    fn full_pipeline_suppresses_hallucination() {
        let (reg, dict) = setup();
        let prepared = PreparedScenario::new(reg.scenario().unwrap(), &dict, 1).unwrap();
        let (s, l) = (small(), large());
        let p = Pipeline::new(s.clone(), l.clone());
        let q = Query::new(ImageRef::parse("park.jpg"), "Is <ys> in the image? yes/no").unwrap();
        let r = p.ask(&prepared, &q, Ablation::FULL).unwrap();
        assert_eq!(r.answer, "no");
        let ys = ConceptId::new("<ys>").unwrap();
        assert!(r.cues.as_ref().unwrap().cues[&ys].present);
        assert!(!r.verified_cues[&ys].present);
        assert_eq!(r.suppressed(), vec![&ys]);
        assert!(!r.context.get(&ys).unwrap().present);
        // detection + two verifications + generation; identity extraction is cached apart
        assert_eq!(r.transcript.len(), 4);
        assert_eq!(prepared.identity_transcript().len(), 1);
        assert_eq!(s.calls()[0].adapter_ref.as_deref(), Some(prepared.selection().adapter_ref().as_str()));

        let again = p.ask(&prepared, &q, Ablation::FULL).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&r).unwrap());
    }

    #[test]
    fn no_reflection_forwards_raw_cues() {
        let (reg, dict) = setup();
        let prepared = PreparedScenario::new(reg.scenario().unwrap(), &dict, 1).unwrap();
        let p = Pipeline::new(small(), large());
        let q = Query::new(ImageRef::parse("park.jpg"), "Is <ys> in the image? yes/no").unwrap();
        let r = p.ask(&prepared, &q, Ablation { use_small: true, use_reflection: false }).unwrap();
        assert_eq!(r.answer, "yes");
        assert!(r.transcript.iter().all(|e| e.stage != Stage::Reflection));
    }

    #[test]
    fn detection_failure_fails_turn() {
        let (reg, dict) = setup();
        let prepared = PreparedScenario::new(reg.scenario().unwrap(), &dict, 1).unwrap();
        let failing = Arc::new(ScriptedBackend::new(
            ScriptedBehavior::new("").rule(ScriptRule::fail_when(&[], ScriptedError::Timeout)),
        ));
        let p = Pipeline::new(failing, large());
        let q = Query::new(ImageRef::parse("park.jpg"), "q").unwrap();
        assert!(matches!(
            p.ask(&prepared, &q, Ablation::FULL),
            Err(PipelineError::Detection(DetectionError::Backend(BackendError::Timeout)))
        ));
    }

    #[test]
    fn large_only_and_presence_variants() {
        let (reg, dict) = setup();
        let prepared = PreparedScenario::new(reg.scenario().unwrap(), &dict, 1).unwrap();
        let (s, l) = (small(), large());
        let p = Pipeline::new(s.clone(), l.clone());
        let q = Query::new(ImageRef::parse("park.jpg"), "Is <bo> here?").unwrap();
        let base = p.ask(&prepared, &q, Ablation::GRID[3]).unwrap();
        assert_eq!(base.transcript.len(), 1);
        assert!(base.adapter.is_none() && base.cues.is_none());
        let presence = p.ask(&prepared, &q, Ablation::GRID[2]).unwrap();
        assert_eq!(presence.transcript.iter().filter(|e| e.stage == Stage::Reflection).count(), 2);
        assert_eq!(s.call_count(), 0);
    }

    #[test]
    fn text_only() {
        let (reg, dict) = setup();
        let prepared = PreparedScenario::new(reg.scenario().unwrap(), &dict, 1).unwrap();
        let l = Arc::new(ScriptedBackend::new(
            ScriptedBehavior::new("A").rule(ScriptRule::fail_when(&["information extractor"], ScriptedError::Transport)),
        ));
        let p = Pipeline::new(small(), l.clone());
        let (answer, transcript) = p.ask_text(&prepared, "What is <bo>?").unwrap();
        assert_eq!(answer, "A");
        // extraction failed: descriptions stand in as categories
        assert!(transcript[0].request.turns[0].text.contains("\"category\": \"<bo> is a cute golden retriever puppy.\""));
    }
}
