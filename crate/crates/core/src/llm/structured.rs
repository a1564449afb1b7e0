//! JSON extraction from free-form completions and the diagnostic retry loop.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde_json::Value;

use super::{CompletionRequest, Gateway, LlmError};

/// Heading under which a rejected attempt's diagnostic is appended.
pub const RETRY_HEADER: &str = "previous attempt failed because:";

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Any,
    String,
    Integer,
    Number,
    Bool,
    Array(Box<Shape>),
    Object(Vec<Field>),
    Nullable(Box<Shape>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: &'static str,
    pub shape: Shape,
    pub required: bool,
}

impl Field {
    pub fn required(name: &'static str, shape: Shape) -> Self {
        Field {
            name,
            shape,
            required: true,
        }
    }

    pub fn optional(name: &'static str, shape: Shape) -> Self {
        Field {
            name,
            shape,
            required: false,
        }
    }
}

impl Shape {
    pub fn list(item: Shape) -> Shape {
        Shape::Array(Box::new(item))
    }

    pub fn nullable(inner: Shape) -> Shape {
        Shape::Nullable(Box::new(inner))
    }

    pub fn describe(&self) -> String {
        match self {
            Shape::Any => "any value".into(),
            Shape::String => "string".into(),
            Shape::Integer => "integer".into(),
            Shape::Number => "number".into(),
            Shape::Bool => "boolean".into(),
            Shape::Array(item) => format!("[{}, ...]", item.describe()),
            Shape::Nullable(inner) => format!("{} or null", inner.describe()),
            Shape::Object(fields) => {
                let parts: Vec<String> = fields
                    .iter()
                    .map(|f| {
                        let opt = if f.required { "" } else { "?" };
                        format!("\"{}\"{opt}: {}", f.name, f.shape.describe())
                    })
                    .collect();
                format!("{{{}}}", parts.join(", "))
            }
        }
    }

    fn check(&self, value: &Value, path: &str) -> Result<(), String> {
        let mismatch = || {
            format!(
                "at {path}: expected {}, found {}",
                self.describe(),
                kind_of(value)
            )
        };
        match self {
            Shape::Any => Ok(()),
            Shape::String if value.is_string() => Ok(()),
            Shape::Integer if value.is_i64() || value.is_u64() => Ok(()),
            Shape::Number if value.is_number() => Ok(()),
            Shape::Bool if value.is_boolean() => Ok(()),
            Shape::Nullable(_) if value.is_null() => Ok(()),
            Shape::Nullable(inner) => inner.check(value, path),
            Shape::Array(item) => {
                let items = value.as_array().ok_or_else(mismatch)?;
                for (i, v) in items.iter().enumerate() {
                    item.check(v, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            Shape::Object(fields) => {
                let map = value.as_object().ok_or_else(mismatch)?;
                for field in fields {
                    match map.get(field.name) {
                        Some(Value::Null) | None if !field.required => {}
                        Some(v) => field.shape.check(v, &format!("{path}.{}", field.name))?,
                        None => {
                            return Err(format!(
                                "at {path}: missing required key \"{}\"",
                                field.name
                            ))
                        }
                    }
                }
                Ok(())
            }
            _ => Err(mismatch()),
        }
    }

    pub fn validate(&self, value: &Value) -> Result<(), String> {
        self.check(value, "$")
    }
}

fn kind_of(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Every JSON object or array in `text`, left to right, never descending
/// into a value already taken.
fn scan_values(text: &str, out: &mut Vec<Value>) {
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let Some(offset) = rest.find(['{', '[']) else {
            break;
        };
        let start = i + offset;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(value)) => {
                out.push(value);
                i = start + stream.byte_offset();
            }
            _ => i = start + 1,
        }
    }
}

fn candidates(text: &str) -> Vec<Value> {
    let mut out = Vec::new();
    for (n, segment) in text.split("```").enumerate() {
        if n % 2 == 1 {
            let body = segment.trim_start_matches(|c: char| c.is_ascii_alphanumeric() || c == '_');
            scan_values(body, &mut out);
        }
    }
    scan_values(text, &mut out);
    out
}

/// First JSON value in `text` that matches `shape`. Fenced blocks are
/// searched before the surrounding prose.
pub fn parse_structured(text: &str, shape: &Shape) -> Result<Value, String> {
    let found = candidates(text);
    let mut first_failure = None;
    for value in found {
        match shape.validate(&value) {
            Ok(()) => return Ok(value),
            Err(diag) => {
                first_failure.get_or_insert(diag);
            }
        }
    }
    Err(match first_failure {
        Some(diag) => format!(
            "the JSON in the reply does not have the expected shape {} ({diag})",
            shape.describe()
        ),
        None => format!(
            "no JSON value found in the reply; expected {}",
            shape.describe()
        ),
    })
}

/// `parse_structured` followed by typed deserialization.
pub fn parse_as<T: DeserializeOwned>(text: &str, shape: &Shape) -> Result<T, String> {
    let value = parse_structured(text, shape)?;
    serde_json::from_value(value).map_err(|e| format!("reply could not be decoded: {e}"))
}

/// Issues `request`, passing each reply to `accept`. A rejection appends its
/// diagnostic to the prompt and retries, at most `budget` extra times.
/// Returns the accepted value and the number of attempts used.
pub fn complete_with_retry<T>(
    gateway: &Gateway,
    request: &CompletionRequest,
    budget: usize,
    mut accept: impl FnMut(&str) -> Result<T, String>,
) -> Result<(T, usize), LlmError> {
    let mut prompt = request.prompt.clone();
    let mut last = String::new();
    for attempt in 1..=budget + 1 {
        let current = CompletionRequest {
            prompt: prompt.clone(),
            ..request.clone()
        };
        let response = gateway.complete(&current)?;
        match accept(&response.text) {
            Ok(value) => return Ok((value, attempt)),
            Err(diag) => {
                tracing::info!(role = %request.role, attempt, diagnostic = %diag, "reply rejected");
                let _ = write!(prompt, "\n\n{RETRY_HEADER}\n{diag}");
                last = diag;
            }
        }
    }
    Err(LlmError::Exhausted {
        role: request.role,
        attempts: budget + 1,
        diagnostic: last,
    })
}

pub fn complete_structured<T: DeserializeOwned>(
    gateway: &Gateway,
    request: &CompletionRequest,
    shape: &Shape,
    budget: usize,
) -> Result<(T, usize), LlmError> {
    complete_with_retry(gateway, request, budget, |text| parse_as(text, shape))
}
