//! Role prompt templates with `{{name}}` placeholders.

use std::collections::BTreeSet;

use super::Role;

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("placeholder `{0}` has no value")]
    Missing(String),
    #[error("value `{0}` matches no placeholder")]
    Unused(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
}

pub fn template(role: Role) -> &'static str {
    match role {
        Role::QueryGeneration => include_str!("../../prompts/query_generation.v1.txt"),
        Role::FileLocator => include_str!("../../prompts/file_locator.v1.txt"),
        Role::Preassimilator => include_str!("../../prompts/preassimilator.v1.txt"),
        Role::CoderParser => include_str!("../../prompts/coder_parser.v1.txt"),
        Role::CodeGeneration => include_str!("../../prompts/code_generation.v1.txt"),
        Role::Refinement => include_str!("../../prompts/refinement.v1.txt"),
        Role::FinalSelection => include_str!("../../prompts/final_selection.v1.txt"),
    }
}

/// Substitutes every placeholder in one pass. Substituted text is never
/// rescanned, so values may contain braces freely.
pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut used = BTreeSet::new();
    let mut rest = template;
    let mut consumed = 0;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or(PromptError::Unterminated(consumed + open))?;
        let name = after[..close].trim();
        let value = values
            .iter()
            .find(|(k, _)| *k == name)
            .ok_or_else(|| PromptError::Missing(name.to_string()))?;
        out.push_str(value.1);
        used.insert(name.to_string());
        let advance = open + 2 + close + 2;
        consumed += advance;
        rest = &rest[advance..];
    }
    out.push_str(rest);
    if let Some((k, _)) = values.iter().find(|(k, _)| !used.contains(*k)) {
        return Err(PromptError::Unused(k.to_string()));
    }
    Ok(out)
}
