//! Lenient extraction of a JSON object from free-form model output.
//!
//! Models wrap JSON in code fences, add prose before or after it, and copy trailing commas
//! from prompt examples. [`extract_object`] strips fences, then tries every balanced `{...}`
//! block in order (string-literal aware) and returns the first one that parses, retrying each
//! with trailing commas removed.

use serde_json::{Map, Value};

/// Bounds the work spent on pathological replies such as deeply nested braces.
const MAX_CANDIDATES: usize = 64;
const MAX_OPENS: usize = 256;

/// Content of the first fenced code block, if any. An unterminated fence runs to the end.
pub fn strip_code_fences(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // Skip the info string (e.g. `json`) up to the end of the fence line.
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    Some(match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    })
}

/// Byte ranges of balanced top-level `{...}` blocks in order of their opening brace.
fn balanced_blocks(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut opens_tried = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        let mut close = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(end) = close {
            out.push(&text[open..=end]);
        }
        opens_tried += 1;
        if out.len() == MAX_CANDIDATES || opens_tried == MAX_OPENS {
            break;
        }
        start = open + 1;
    }
    out
}

/// Removes commas that directly precede `}` or `]` outside string literals.
pub fn remove_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn parse_object(candidate: &str) -> Option<Map<String, Value>> {
    let attempt = |s: &str| match serde_json::from_str::<Value>(s) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    };
    attempt(candidate).or_else(|| attempt(&remove_trailing_commas(candidate)))
}

/// First JSON object found in `text`, or `None`.
pub fn extract_object(text: &str) -> Option<Map<String, Value>> {
    let search = |s: &str| balanced_blocks(s).into_iter().find_map(parse_object);
    if let Some(fenced) = strip_code_fences(text) {
        if let Some(obj) = search(fenced) {
            return Some(obj);
        }
    }
    search(text)
}
