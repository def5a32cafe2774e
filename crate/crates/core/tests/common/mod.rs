#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use slc::backends::{ScriptRule, ScriptedBackend, ScriptedBehavior};
use slc::dictionary::{build_dictionary, Dictionary};
use slc::registry::{Concept, ConceptId, Registry};

pub const BO: &str = "<bo> is a cute golden retriever puppy with a playful expression.";
pub const LINA: &str = "<lina> is a young woman with short black hair who often wears a red scarf.";

pub fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("prompts").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("missing golden file {}: {e}", path.display()))
}

pub fn id(s: &str) -> ConceptId {
    ConceptId::new(s).unwrap()
}

pub fn bo_lina() -> Vec<Concept> {
    vec![
        Concept::new(id("<bo>"), BO, vec![vec![1.0, 0.0]]).unwrap(),
        Concept::new(id("<lina>"), LINA, vec![vec![0.0, 1.0]]).unwrap(),
    ]
}

/// Two orthogonal concepts and a two-entry dictionary built from them.
pub fn park() -> (Registry, Dictionary) {
    let mut reg = Registry::new();
    reg.register_concept("<bo>", "<bo> is a cute golden retriever puppy.", vec![vec![1.0, 0.0]]).unwrap();
    reg.register_concept("<ys>", "<ys> is a grey tabby cat.", vec![vec![0.0, 1.0]]).unwrap();
    let refs = [(0, "metac-0".to_string()), (1, "metac-1".to_string())].into_iter().collect();
    let dict = build_dictionary(reg.concepts(), 2, 7, &refs).unwrap();
    (reg, dict)
}

/// Small model that sees `<bo>` and hallucinates `<ys>` next to it.
pub fn hallucinating_small() -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::constant(
        r#"{"<bo>": {"present": true, "location-absolute": "center", "location-relative": "on the grass"}, "<ys>": {"present": true, "location-absolute": "left", "location-relative": "next to <bo>"}}"#,
    ))
}

/// Large model that rejects both locations of the cat and answers presence questions from
/// the Detection Report.
pub fn verifying_large() -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(
        ScriptedBehavior::new("yes")
            .rule(ScriptRule::reply_when(
                &["information extractor"],
                r#"{"<bo>": {"category": "a golden retriever puppy", "attributes": ""}, "<ys>": {"category": "a grey tabby cat", "attributes": ""}}"#,
            ))
            .rule(ScriptRule::reply_when(&["Q1. Do you see a grey tabby cat"], "no no"))
            .rule(ScriptRule::reply_when(&["Q1."], "yes yes"))
            .rule(ScriptRule::reply_when(&["<ys>: {\"present\": false}", "Is <ys>"], "no"))
            .rule(ScriptRule::reply_when(&["Is <ys>"], "yes")),
    ))
}
