//! Rendered prompts against the checked-in files under `prompts/`.

mod common;
use common::{bo_lina, golden, id};

use std::collections::BTreeMap;

use slc::detection::{render_detection_prompt, Cue};
use slc::generation::{render_answer_prompt, DetectionReportContext};
use slc::prompts;
use slc::reflection::{render_identity_prompt, render_verification_questions, Identity, IdentityTable, VerifiedCueReport};

fn puppy() -> Identity {
    Identity {
        category: "a golden retriever puppy".into(),
        attributes: "always playful expression".into(),
    }
}

#[test]
fn golden_detection_prompt() {
    let (system, user) = render_detection_prompt(&bo_lina()).unwrap();
    assert_eq!(system, golden("detection_system.txt"), "detection system prompt drifted");
    assert_eq!(user, golden("detection_user.txt"), "detection user prompt drifted");
}

#[test]
fn golden_identity_prompt() {
    let (system, user) = render_identity_prompt(&bo_lina()).unwrap();
    assert_eq!(system, golden("identity_system.txt"), "identity system prompt drifted");
    assert_eq!(user, golden("detection_user.txt"));
    assert!(system.contains("\"category\": \"a shiba inu\""));
}

#[test]
fn golden_reflection_prompt() {
    assert_eq!(prompts::REFLECTION_SYSTEM, golden("reflection_system.txt"));
    let cue = Cue::present(Some("center"), Some("behind the car"));
    let questions = render_verification_questions(&puppy(), &cue).unwrap();
    assert_eq!(prompts::reflection_user(&questions.asked()), golden("reflection_user.txt"));
}

#[test]
fn golden_answer_prompt() {
    let concepts = bo_lina();
    let verified = VerifiedCueReport {
        turn_index: 0,
        cues: BTreeMap::from([
            (id("<bo>"), Cue::present(Some("center"), Some("behind the car"))),
            (id("<lina>"), Cue::absent()),
        ]),
        audit: BTreeMap::new(),
    };
    let identities: IdentityTable = BTreeMap::from([(id("<bo>"), puppy())]);
    let context = DetectionReportContext::build(&concepts, &verified, &identities);
    let (system, user) = render_answer_prompt(&context, "Is <bo> in the image?");
    assert_eq!(system, golden("answer_system.txt"), "answer system prompt drifted");
    assert_eq!(user, "Is <bo> in the image?");
}

#[test]
fn golden_files_have_no_trailing_newline() {
    for name in [
        "answer_system.txt",
        "detection_system.txt",
        "detection_user.txt",
        "identity_system.txt",
        "reflection_system.txt",
        "reflection_user.txt",
    ] {
        assert!(!golden(name).ends_with('\n'), "{name} ends with a newline");
    }
}
