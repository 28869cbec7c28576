use serde_json::{Map, Value};

use super::LlmError;

/// How many `{` positions are tried before giving up.
const MAX_CANDIDATES: usize = 64;

/// Extracts the first balanced `{...}` in `completion` that parses as a JSON
/// object. Prose around it is ignored.
pub fn parse_envelope(completion: &str) -> Result<Map<String, Value>, LlmError> {
    let bytes = completion.as_bytes();
    let mut last_error = None;
    let starts = bytes.iter().enumerate().filter(|(_, b)| **b == b'{').map(|(i, _)| i);
    for start in starts.take(MAX_CANDIDATES) {
        let Some(end) = balanced_end(bytes, start) else {
            continue;
        };
        match serde_json::from_str::<Value>(&completion[start..=end]) {
            Ok(Value::Object(map)) => return Ok(map),
            Ok(_) => {}
            Err(e) => last_error = Some(e.to_string()),
        }
    }
    Err(LlmError::MalformedCompletion(match last_error {
        Some(e) => format!("no parseable JSON object ({e})"),
        None => "no balanced JSON object".to_string(),
    }))
}

/// Index of the `}` closing the `{` at `start`, honouring JSON string quoting.
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
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}
