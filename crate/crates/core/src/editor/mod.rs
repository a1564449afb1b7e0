//! Span resolution and textual splicing of regenerated definitions.

mod patch;

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::indexer::{CodeUnit, FileSchematic, SourceParser, Span, SyntaxError, UnitKind};

pub use patch::{apply_patch, split_patch, unified_diff, workspace_patch, FilePatch, PatchError};

/// How far a model-reported start line may drift before resolution fails.
pub const SNAP_TOLERANCE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    TopLevel,
    Class,
    #[serde(alias = "function")]
    Method,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevantLocation {
    pub level: Level,
    /// Qualified for methods, empty for top-level spans.
    pub name: String,
    pub start_line: usize,
    /// Required for top-level spans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_line: Option<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTarget {
    pub location: RelevantLocation,
    pub resolved_span: Span,
    /// Leading whitespace of the definition line, reused verbatim.
    pub indent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCode {
    pub text: String,
    pub temperature: f64,
    pub attempt: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpliceResult {
    pub new_content: String,
    pub changed_span: Span,
    pub syntax_ok: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum EditError {
    #[error("cannot resolve {level:?} `{name}` near line {line}: {reason}")]
    Unresolved {
        level: Level,
        name: String,
        line: usize,
        reason: String,
    },
    #[error("file does not parse: {0}")]
    UnparseableFile(String),
    #[error("replacement rejected: {0}")]
    Replacement(String),
    #[error("path `{0}` escapes the workspace")]
    PathEscape(String),
    #[error("file `{0}` not found in workspace")]
    MissingFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn lines_of(content: &str) -> Vec<&str> {
    content.split_inclusive('\n').collect()
}

fn leading_ws(line: &str) -> &str {
    let trimmed = line.trim_start_matches([' ', '\t']);
    &line[..line.len() - trimmed.len()]
}

fn is_blank(line: &str) -> bool {
    line.trim().is_empty()
}

fn unit_matches(unit: &CodeUnit, level: Level, name: &str) -> bool {
    let kind_ok = match level {
        Level::Method => matches!(unit.kind, UnitKind::Function | UnitKind::Method),
        Level::Class => unit.kind == UnitKind::Class,
        Level::TopLevel => false,
    };
    kind_ok && (unit.qualified_name == name || unit.name == name)
}

fn unresolved(location: &RelevantLocation, reason: impl Into<String>) -> EditError {
    EditError::Unresolved {
        level: location.level,
        name: location.name.clone(),
        line: location.start_line,
        reason: reason.into(),
    }
}

/// Finds the unit a location names. Exact start or `def` line wins;
/// otherwise a unique match within `SNAP_TOLERANCE` lines is accepted.
pub fn resolve_in_schematic<'s>(
    schematic: &'s FileSchematic,
    location: &RelevantLocation,
) -> Result<&'s CodeUnit, EditError> {
    let exact_qualified: Vec<&CodeUnit> = schematic
        .units
        .iter()
        .filter(|u| {
            unit_matches(u, location.level, &location.name) && u.qualified_name == location.name
        })
        .collect();
    let named: Vec<&CodeUnit> = if exact_qualified.is_empty() {
        schematic
            .units
            .iter()
            .filter(|u| unit_matches(u, location.level, &location.name))
            .collect()
    } else {
        exact_qualified
    };
    if named.is_empty() {
        return Err(unresolved(location, "no definition with that name"));
    }
    let line = location.start_line;
    let exact: Vec<&&CodeUnit> = named
        .iter()
        .filter(|u| u.span.start_line == line || u.def_line == line)
        .collect();
    if exact.len() == 1 {
        return Ok(exact[0]);
    }
    let near: Vec<&&CodeUnit> = named
        .iter()
        .filter(|u| {
            u.span.start_line.abs_diff(line) <= SNAP_TOLERANCE
                || u.def_line.abs_diff(line) <= SNAP_TOLERANCE
        })
        .collect();
    match near.len() {
        1 => Ok(near[0]),
        0 => {
            let starts: Vec<String> = named
                .iter()
                .map(|u| u.span.start_line.to_string())
                .collect();
            Err(unresolved(
                location,
                format!(
                    "definitions with that name start at line(s) {}",
                    starts.join(", ")
                ),
            ))
        }
        _ => Err(unresolved(location, "several definitions match")),
    }
}

/// Checks a top-level span against the schematic and clamps it to the file.
pub fn check_top_level(
    schematic: &FileSchematic,
    location: &RelevantLocation,
    line_count: usize,
) -> Result<Span, EditError> {
    let end = location
        .end_line
        .ok_or_else(|| unresolved(location, "top_level locations need end_line"))?;
    if line_count == 0 || location.start_line == 0 || location.start_line > line_count {
        return Err(unresolved(location, format!("file has {line_count} lines")));
    }
    let span = Span::new(location.start_line, end.max(1).min(line_count));
    if span.start_line > span.end_line {
        return Err(unresolved(location, "start_line is after end_line"));
    }
    if let Some(unit) = schematic.definitions().find(|u| u.span.intersects(&span)) {
        return Err(unresolved(
            location,
            format!(
                "span overlaps `{}` (lines {}-{})",
                unit.qualified_name, unit.span.start_line, unit.span.end_line
            ),
        ));
    }
    Ok(span)
}

pub fn resolve_span(
    parser: &dyn SourceParser,
    content: &str,
    location: &RelevantLocation,
) -> Result<EditTarget, EditError> {
    let schematic = parser.parse_file(&location.file, content);
    if !schematic.parse_ok {
        return Err(EditError::UnparseableFile(
            schematic.parse_error.unwrap_or_default(),
        ));
    }
    let lines = lines_of(content);
    let (span, indent_line) = match location.level {
        Level::TopLevel => {
            let span = check_top_level(&schematic, location, lines.len())?;
            (span, span.start_line)
        }
        Level::Class | Level::Method => {
            let unit = resolve_in_schematic(&schematic, location)?;
            (unit.span, unit.def_line)
        }
    };
    Ok(EditTarget {
        location: location.clone(),
        resolved_span: span,
        indent: leading_ws(lines[indent_line - 1]).to_string(),
    })
}

/// The text currently occupying `span`.
pub fn span_text(content: &str, span: Span) -> String {
    let lines = lines_of(content);
    let end = span.end_line.min(lines.len());
    let start = span.start_line.max(1);
    if start > end {
        return String::new();
    }
    lines[start - 1..end].concat()
}

/// Drops surrounding blank lines and guarantees a single trailing newline.
fn normalize(text: &str) -> Vec<String> {
    let text = text.replace("\r\n", "\n");
    let mut lines: Vec<String> = text.split_inclusive('\n').map(String::from).collect();
    while lines.first().is_some_and(|l| is_blank(l)) {
        lines.remove(0);
    }
    while lines.last().is_some_and(|l| is_blank(l)) {
        lines.pop();
    }
    if let Some(last) = lines.last_mut() {
        if !last.ends_with('\n') {
            last.push('\n');
        }
    }
    lines
}

fn own_indent(lines: &[String]) -> String {
    lines
        .iter()
        .find(|l| !is_blank(l) && !l.trim_start().starts_with('#'))
        .map(|l| leading_ws(l).to_string())
        .unwrap_or_default()
}

fn interior_set(parser: &dyn SourceParser, source: &str, offset: usize) -> Vec<bool> {
    let count = source.split_inclusive('\n').count();
    let mut flags = vec![false; count];
    for line in parser.string_interior_lines(source) {
        if line > offset && line - offset <= count {
            flags[line - offset - 1] = true;
        }
    }
    flags
}

/// Moves `lines` from indent `from` to column 0, leaving string interiors alone.
fn dedent(
    parser: &dyn SourceParser,
    lines: &[String],
    from: &str,
) -> Result<Vec<String>, SyntaxError> {
    if from.is_empty() {
        return Ok(lines.to_vec());
    }
    let wrapped = format!("if True:\n{}", lines.concat());
    parser.check(&wrapped).map_err(|mut e| {
        e.line = e.line.saturating_sub(1);
        e
    })?;
    let interior = interior_set(parser, &wrapped, 1);
    Ok(lines
        .iter()
        .zip(interior)
        .map(|(line, inside)| {
            if inside {
                line.clone()
            } else if let Some(rest) = line.strip_prefix(from) {
                rest.to_string()
            } else {
                line.trim_start_matches([' ', '\t']).to_string()
            }
        })
        .collect())
}

fn reindent(parser: &dyn SourceParser, lines: &[String], to: &str) -> Vec<String> {
    let interior = interior_set(parser, &lines.concat(), 0);
    lines
        .iter()
        .zip(interior)
        .map(|(line, inside)| {
            if inside || is_blank(line) || to.is_empty() {
                line.clone()
            } else {
                format!("{to}{line}")
            }
        })
        .collect()
}

/// Splices `replacement` over the target span. The replacement must parse
/// once dedented; its lines are re-indented to the target's indent.
pub fn splice(
    parser: &dyn SourceParser,
    content: &str,
    target: &EditTarget,
    replacement: &GeneratedCode,
) -> Result<SpliceResult, EditError> {
    let lines = lines_of(content);
    let span = target.resolved_span;
    if span.start_line == 0 || span.end_line > lines.len() || span.start_line > span.end_line {
        return Err(EditError::Replacement(format!(
            "span {}-{} outside file of {} lines",
            span.start_line,
            span.end_line,
            lines.len()
        )));
    }
    let normalized = normalize(&replacement.text);
    if normalized.is_empty() {
        return Err(EditError::Replacement("replacement is empty".into()));
    }
    let own = own_indent(&normalized);
    let dedented =
        dedent(parser, &normalized, &own).map_err(|e| EditError::Replacement(e.to_string()))?;
    parser
        .check(&dedented.concat())
        .map_err(|e| EditError::Replacement(e.to_string()))?;

    let mut body = if own == target.indent {
        normalized
    } else {
        reindent(parser, &dedented, &target.indent)
    };
    let span_last = lines[span.end_line - 1];
    if !span_last.ends_with('\n') {
        if let Some(last) = body.last_mut() {
            last.pop();
        }
    }

    let mut new_content = String::with_capacity(content.len() + 64);
    for l in &lines[..span.start_line - 1] {
        new_content.push_str(l);
    }
    for l in &body {
        new_content.push_str(l);
    }
    for l in &lines[span.end_line..] {
        new_content.push_str(l);
    }
    let changed_span = Span::new(span.start_line, span.start_line + body.len() - 1);
    let (syntax_ok, diagnostic) = match parser.check(&new_content) {
        Ok(()) => (true, None),
        Err(e) => (false, Some(e.to_string())),
    };
    Ok(SpliceResult {
        new_content,
        changed_span,
        syntax_ok,
        diagnostic,
    })
}

/// Change in file length caused by a splice, for shifting later locations.
pub fn line_delta(target: &EditTarget, result: &SpliceResult) -> isize {
    result.changed_span.len() as isize - target.resolved_span.len() as isize
}

/// Joins a repo-relative path onto `root`, refusing anything that could
/// leave it.
pub fn contained_path(root: &Path, relative: &str) -> Result<PathBuf, EditError> {
    let rel = Path::new(relative);
    if relative.is_empty()
        || rel
            .components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
    {
        return Err(EditError::PathEscape(relative.to_string()));
    }
    Ok(root.join(rel))
}

/// Resolves, splices and writes one plan element inside `workspace`. The
/// file is rewritten only when the result parses.
pub fn apply_plan_element(
    parser: &dyn SourceParser,
    workspace: &Path,
    location: &RelevantLocation,
    code: &GeneratedCode,
) -> Result<(EditTarget, SpliceResult), EditError> {
    let path = contained_path(workspace, &location.file)?;
    if !path.is_file() {
        return Err(EditError::MissingFile(location.file.clone()));
    }
    let content = fs::read_to_string(&path).map_err(|source| EditError::Io {
        path: path.clone(),
        source,
    })?;
    let target = resolve_span(parser, &content, location)?;
    let result = splice(parser, &content, &target, code)?;
    if result.syntax_ok {
        fs::write(&path, &result.new_content).map_err(|source| EditError::Io { path, source })?;
    }
    Ok((target, result))
}
