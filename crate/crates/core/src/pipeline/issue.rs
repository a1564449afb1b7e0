use serde_json::Value;

/// Fields that carry guidance beyond the problem statement. They are
/// removed before anything downstream sees the record.
pub const HINT_FIELDS: &[&str] = &["hints", "hints_text"];

const TEXT_FIELDS: &[&str] = &["problem_statement", "text", "issue", "body"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub instance_id: Option<String>,
    pub text: String,
}

pub fn strip_hints(record: &mut Value) {
    if let Value::Object(map) = record {
        for key in HINT_FIELDS {
            map.remove(*key);
        }
    }
}

/// Accepts a JSON object with a problem statement field, or plain text.
pub fn parse_issue(raw: &str) -> Result<Issue, String> {
    let trimmed = raw.trim();
    if trimmed.starts_with('{') {
        let mut record: Value =
            serde_json::from_str(trimmed).map_err(|e| format!("issue JSON: {e}"))?;
        strip_hints(&mut record);
        let text = TEXT_FIELDS
            .iter()
            .find_map(|k| record.get(*k).and_then(Value::as_str))
            .ok_or_else(|| format!("issue JSON needs one of: {}", TEXT_FIELDS.join(", ")))?;
        if text.trim().is_empty() {
            return Err("issue text is empty".into());
        }
        return Ok(Issue {
            instance_id: record
                .get("instance_id")
                .and_then(Value::as_str)
                .map(String::from),
            text: text.to_string(),
        });
    }
    if trimmed.is_empty() {
        return Err("issue text is empty".into());
    }
    Ok(Issue {
        instance_id: None,
        text: raw.to_string(),
    })
}
