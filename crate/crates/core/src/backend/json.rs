use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum JsonError {
    #[error("no JSON object found in reply")]
    NoJsonFound,
    #[error("invalid JSON object: {0}")]
    InvalidJson(String),
}

/// End (exclusive) of the balanced object starting at `start`, honoring
/// string literals and escapes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
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
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced top-level JSON object in `text` that parses, tolerating
/// surrounding prose and code fences.
pub fn extract_json(text: &str) -> Result<Value, JsonError> {
    let bytes = text.as_bytes();
    let mut first_error: Option<String> = None;
    let mut pos = 0;
    while let Some(start) = text[pos..].find('{').map(|i| i + pos) {
        match balanced_end(bytes, start) {
            Some(end) => match serde_json::from_str::<Value>(&text[start..end]) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    first_error.get_or_insert_with(|| e.to_string());
                    pos = start + 1;
                }
            },
            None => {
                first_error.get_or_insert_with(|| "unbalanced braces".to_string());
                pos = start + 1;
            }
        }
    }
    Err(match first_error {
        Some(e) => JsonError::InvalidJson(e),
        None => JsonError::NoJsonFound,
    })
}
