use serde_json::Value;

use crate::schema::{SchemaTag, SchemaViolation};

/// Drops a leading `<reasoning>...</reasoning>` block if present.
pub fn strip_reasoning(raw: &str) -> &str {
    const CLOSE: &str = "</reasoning>";
    match (raw.find("<reasoning>"), raw.rfind(CLOSE)) {
        (Some(_), Some(end)) => &raw[end + CLOSE.len()..],
        _ => raw,
    }
}

/// Turns a raw model reply into a document for `tag`.
///
/// Text kinds accept either bare prose or a JSON string / `{"response": ..}`.
/// Structured kinds take the first JSON value in the reply, ignoring code
/// fences and surrounding chatter.
pub fn parse_document(raw: &str, tag: SchemaTag) -> Result<Value, SchemaViolation> {
    let body = strip_fences(strip_reasoning(raw).trim());
    if tag == SchemaTag::Text {
        return Ok(match serde_json::from_str::<Value>(body) {
            Ok(v @ (Value::String(_) | Value::Object(_))) => v,
            _ => Value::String(body.to_string()),
        });
    }
    let start = body
        .find(['{', '['])
        .ok_or_else(|| SchemaViolation::new("$", "reply contains no JSON value"))?;
    let mut stream = serde_json::Deserializer::from_str(&body[start..]).into_iter::<Value>();
    match stream.next() {
        Some(Ok(value)) => Ok(value),
        Some(Err(e)) => Err(SchemaViolation::new(
            "$",
            format!("reply is not valid JSON: {e}"),
        )),
        None => Err(SchemaViolation::new("$", "reply contains no JSON value")),
    }
}

fn strip_fences(text: &str) -> &str {
    let Some(rest) = text.strip_prefix("```") else {
        return text;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}
