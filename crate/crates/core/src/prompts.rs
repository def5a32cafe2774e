//! Prompt templates for every model call in the pipeline.
//!
//! The static texts are checked byte-for-byte against the golden files in `prompts/`; edit a
//! template and its golden together.

use crate::registry::Concept;

/// System prompt for the small model's concept detection.
pub const DETECTION_SYSTEM: &str = "\
You are a high-precision concept detector.
Task
You should inspect the image and output one JSON object that covers every concept in the Concept List provided by the user while conforming to the schema below.
For each concept <concept_id> in the list:
  • If visible, set:
    • \"present\": true
    • \"location-absolute\": \"concise area, e.g. \"top-left quadrant\"
    • \"location-relative\": \"spatial relation, e.g. \"to the left of the person in black suit\"
  • If not visible, set:
    • \"present\": false → omit all other keys
The final output should be a JSON object like: {
  \"<concept_id_1>\": {
    \"present\": <boolean>,
    \"location-absolute\": <string> or \"\",
    \"location-relative\": <string> or \"\",
  },
  \"<concept_id_2>\": {
    \"present\": <boolean>,
    \"location-absolute\": <string> or \"\",
    \"location-relative\": <string> or \"\",
  }
...
}

Rules
  • Output plain English text only—no Markdown, no code fences.
  • Keep every concept ID enclosed in angle brackets (<>).
  • If present = false, omit all other keys.
  • Boolean literals must be lowercase true/false.
  • Do not add any extra keys, comments, or explanatory text.";

/// System prompt for the large model's identity extraction, including its worked example.
pub const IDENTITY_SYSTEM: &str = "\
You are an information extractor.
Task
Inspect the textual descriptions below and return one JSON object that covers every concept in the Concept List while conforming to the schema:
  • \"category\" : permanent class, e.g. \"a golden retriever puppy\", \"a blue cartoon character\"
  • \"attributes\" : mutable traits, e.g. \"always playful expression; dresses in trendy clothes\"

Example
Example:
User prompt
  Concept List:
  <bo>: <bo> is a cute golden retriever puppy with a playful expression.
  <shiba-sleep>: <shiba-sleep> is a shiba inu sleeping peacefully in a cozy home.
Expected output
{
  \"<bo>\": {
    \"category\": \"a golden retriever puppy\",
    \"attributes\": \"always playful expression\"
  },
  \"<shiba-sleep>\": {
    \"category\": \"a shiba inu\",
    \"attributes\": \"can sleep peacefully; lives in cozy home\"
  }
}

Rules
  • Output plain English text only—no Markdown, no code fences.
  • Keep every concept ID enclosed in angle brackets (<>).
  • Provide exactly the two keys for each concept—no extras.
  • Do not add comments or explanatory text outside the JSON object.";

/// System prompt for the large model's yes/no verification.
pub const REFLECTION_SYSTEM: &str = "\
You are a visual verifier.
Task
You should answer each visual question with yes or no—nothing else.";

/// Rules block appended after the verification questions in the user turn.
pub const REFLECTION_RULES: &str = "\
Rules
  • Provide exactly one \"yes\" or \"no\" per question.
  • If there are N questions, output N tokens separated by a single space.
  • Do not include any additional words, punctuation, or commentary.";

/// Rules that follow the Detection Report in the answer-generation system prompt.
pub const ANSWER_RULES: &str = "\
Rules
Use the Detection Report to answer the user’s visual question.
  • category: immutable essence (e.g. \"a golden retriever puppy\").
  • attributes: mutable traits that may or may not be visible (e.g. \"always playful expression\").
  • If present = false, it means the concept is not in the image. You should not mention the concept; reply \"no\" if asked about its presence.
  • If present = true, it means it concept is in the image. You should ground your answer strictly on the provided fields; reply \"yes\" if asked about its presence.";

pub const DETECTION_REPORT_HEADER: &str = "Detection Report";
pub const CONCEPT_LIST_HEADER: &str = "Concept List";
pub const CONCEPT_INFO_HEADER: &str = "Concept Information";

/// `Concept List` followed by one `<id>: description` line per concept, in the given order.
pub fn concept_list(concepts: &[Concept]) -> String {
    let mut out = String::from(CONCEPT_LIST_HEADER);
    for c in concepts {
        out.push('\n');
        out.push_str(c.id.as_str());
        out.push_str(": ");
        out.push_str(&c.description);
    }
    out
}

/// User turn for one verification call: numbered questions, a blank line, then the rules.
pub fn reflection_user(questions: &[String]) -> String {
    let mut out = String::new();
    for (i, q) in questions.iter().enumerate() {
        out.push_str(&format!("Q{}. {}\n", i + 1, q));
    }
    out.push('\n');
    out.push_str(REFLECTION_RULES);
    out
}

pub fn verification_absolute(category: &str, loc_abs: &str) -> String {
    format!("Do you see {category} at {loc_abs} of the image? (yes or no)")
}

pub fn verification_relative(category: &str, loc_rel: &str) -> String {
    format!("Is {category} {loc_rel}? (yes or no)")
}

/// Presence-only check used when the small model is disabled.
pub fn verification_presence(category: &str) -> String {
    format!("Do you see {category} in the image? (yes or no)")
}

/// Answer-generation system prompt around an already serialized report body.
pub fn answer_system(report_body: &str) -> String {
    let mut out = String::from(DETECTION_REPORT_HEADER);
    out.push('\n');
    out.push_str(report_body);
    out.push_str("\n\n");
    out.push_str(ANSWER_RULES);
    out
}

/// A labelled block of concept lines followed by the user's question. An empty block yields
/// just the question.
pub fn context_then_question(header: &str, lines: &[String], question: &str) -> String {
    if lines.is_empty() {
        return question.to_string();
    }
    let mut out = String::from(header);
    for l in lines {
        out.push('\n');
        out.push_str(l);
    }
    out.push_str("\n\n");
    out.push_str(question);
    out
}

/// JSON string literal for `s`.
pub(crate) fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}
