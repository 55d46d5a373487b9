//! Structured-output extraction for model replies that were asked for JSON.
//!
//! Repairs are applied in a fixed order and a strict parse is attempted after
//! each one: code-fence stripping, trimming prose outside the outermost
//! braces, trailing-comma removal. If the outermost span still does not
//! parse, each balanced `{...}` span is tried in order of appearance.

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("empty reply")]
    Empty,
    #[error("no JSON object found in reply")]
    NoObject,
    #[error("no parseable JSON object after repair: {0}")]
    Unparseable(String),
}

pub fn extract_json(raw: &str) -> Result<Map<String, Value>, ExtractError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(ExtractError::Empty);
    }
    if let Some(obj) = parse_object(trimmed) {
        return Ok(obj);
    }

    let unfenced = strip_fences(trimmed);
    if let Some(obj) = parse_object(unfenced) {
        return Ok(obj);
    }

    let (Some(first), Some(last)) = (unfenced.find('{'), unfenced.rfind('}')) else {
        return Err(ExtractError::NoObject);
    };
    if last < first {
        return Err(ExtractError::NoObject);
    }
    let span = &unfenced[first..=last];
    if let Some(obj) = parse_object(span) {
        return Ok(obj);
    }
    let repaired = remove_trailing_commas(span);
    if let Some(obj) = parse_object(&repaired) {
        return Ok(obj);
    }

    for (start, _) in unfenced.match_indices('{') {
        if let Some(end) = balanced_end(unfenced, start) {
            let candidate = remove_trailing_commas(&unfenced[start..end]);
            if let Some(obj) = parse_object(&candidate) {
                return Ok(obj);
            }
        }
    }

    let reason = serde_json::from_str::<Value>(&repaired)
        .err()
        .map_or_else(|| "top-level value is not an object".to_string(), |e| e.to_string());
    Err(ExtractError::Unparseable(reason))
}

fn parse_object(s: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(s) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    }
}

/// Contents of the first fenced block, or the input if it has no fence. An
/// unterminated fence yields everything after the opening line.
fn strip_fences(s: &str) -> &str {
    let Some(open) = s.find("```") else {
        return s;
    };
    let after = &s[open + 3..];
    // Skip the info string (`json`, `JSON`, ...) up to the end of the line.
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// Drop commas that directly precede `}` or `]` (ignoring whitespace),
/// leaving string contents untouched.
fn remove_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|ch| !ch.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

/// Byte index one past the brace closing the one at `start`, string-aware.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn fenced_block() {
        let got = extract_json("```json\n{\"frame-categories\":[]}\n```").unwrap();
        assert_eq!(got, obj(json!({"frame-categories": []})));
    }

    #[test]
    fn prose_around_object() {
        let got =
            extract_json("Sure! Here is the JSON: {\"Fit\": \"6\", \"Frame\": \"AI Risks\", \"Rationale\": \"...\"}")
                .unwrap();
        assert_eq!(got["Fit"], json!("6"));
    }

    #[test]
    fn trailing_comma() {
        assert_eq!(extract_json("{\"a\": 1,}").unwrap(), obj(json!({"a": 1})));
        assert_eq!(extract_json("{\"a\": [1, 2, ], }").unwrap(), obj(json!({"a": [1, 2]})));
    }

    #[test]
    fn commas_inside_strings_survive() {
        let got = extract_json("{\"a\": \"x,}\",}").unwrap();
        assert_eq!(got["a"], json!("x,}"));
    }

    #[test]
    fn picks_first_valid_object_among_several() {
        let got = extract_json("first {\"a\": 1} then {\"b\": 2}").unwrap();
        assert_eq!(got, obj(json!({"a": 1})));
    }

    #[test]
    fn failures() {
        assert_eq!(extract_json("   ").unwrap_err(), ExtractError::Empty);
        assert_eq!(extract_json("Yes").unwrap_err(), ExtractError::NoObject);
        assert!(matches!(
            extract_json("{\"a\": }").unwrap_err(),
            ExtractError::Unparseable(_)
        ));
        assert!(matches!(extract_json("[1, 2]").unwrap_err(), ExtractError::NoObject));
    }

    fn json_leaf() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i32>().prop_map(|i| json!(i)),
            "[ -~]{0,12}".prop_map(Value::String),
        ]
    }

    fn json_tree() -> impl Strategy<Value = Value> {
        json_leaf().prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z]{1,5}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn idempotent_on_serialized_output(
            map in prop::collection::btree_map("[a-zA-Z ]{1,8}", json_tree(), 0..5),
            prefix in "[a-zA-Z :!]{0,20}",
        ) {
            let value: Map<String, Value> = map.into_iter().collect();
            let raw = format!("{prefix}```json\n{}\n```", Value::Object(value.clone()));
            let once = extract_json(&raw).unwrap();
            prop_assert_eq!(&once, &value);
            let twice = extract_json(&Value::Object(once.clone()).to_string()).unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
