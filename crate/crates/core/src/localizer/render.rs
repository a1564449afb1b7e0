use std::fmt::Write;

use crate::indexer::{FileSchematic, UnitKind};

const DOC_PREVIEW_CHARS: usize = 200;

fn doc_preview(doc: &str) -> String {
    let first = doc.trim().split("\n\n").next().unwrap_or_default();
    let flat = first.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() > DOC_PREVIEW_CHARS {
        let cut: String = flat.chars().take(DOC_PREVIEW_CHARS).collect();
        format!("{cut}...")
    } else {
        flat
    }
}

/// Compact outline of a file: one line per unit, indented by nesting.
pub fn render_schematic(schematic: &FileSchematic) -> String {
    let mut out = format!("{}\n", schematic.path);
    if !schematic.parse_ok {
        let _ = writeln!(
            out,
            "  (does not parse: {})",
            schematic.parse_error.as_deref().unwrap_or("unknown error")
        );
        return out;
    }
    for unit in &schematic.units {
        let lines = format!("lines {}-{}", unit.span.start_line, unit.span.end_line);
        let depth = if unit.parent_class.is_some() { 2 } else { 1 };
        let pad = "  ".repeat(depth);
        match unit.kind {
            UnitKind::TopLevel => {
                let _ = writeln!(out, "{pad}[top-level statements, {lines}]");
                continue;
            }
            UnitKind::Class => {
                let _ = writeln!(out, "{pad}class {} [{lines}]", unit.qualified_name);
            }
            UnitKind::Function | UnitKind::Method => {
                let kind = if unit.kind == UnitKind::Method {
                    "method"
                } else {
                    "function"
                };
                let _ = writeln!(
                    out,
                    "{pad}{kind} {} [{lines}]: {}",
                    unit.qualified_name,
                    unit.signature
                        .split_whitespace()
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
        }
        for d in &unit.decorators {
            let _ = writeln!(out, "{pad}  decorator {d}");
        }
        if let Some(doc) = unit
            .docstring
            .as_deref()
            .map(doc_preview)
            .filter(|d| !d.is_empty())
        {
            let _ = writeln!(out, "{pad}  doc: {doc}");
        }
    }
    out
}

/// Source lines prefixed with right-aligned 1-based numbers.
pub fn numbered_source(content: &str) -> String {
    let width = content.lines().count().max(1).to_string().len();
    let mut out = String::with_capacity(content.len() + content.len() / 4);
    for (i, line) in content.lines().enumerate() {
        let _ = writeln!(out, "{:>width$} | {line}", i + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indexer::{PythonParser, SourceParser};

    #[test]
    fn outline_lists_units_with_spans() {
        let src = "import os\n\nclass A:\n    \"\"\"Holder.\"\"\"\n    @staticmethod\n    def f(x):\n        return x\n\ndef g():\n    pass\n";
        let s = PythonParser::new().parse_file("m.py", src);
        let text = render_schematic(&s);
        assert!(text.starts_with("m.py\n"));
        assert!(text.contains("[top-level statements, lines 1-1]"));
        assert!(text.contains("class A [lines 3-7]"));
        assert!(text.contains("    method A.f [lines 5-7]: def f(x):"));
        assert!(text.contains("decorator @staticmethod"));
        assert!(text.contains("doc: Holder."));
        assert!(text.contains("function g [lines 9-10]"));
    }

    #[test]
    fn numbering() {
        assert_eq!(numbered_source("a\nb\n"), "1 | a\n2 | b\n");
        let many = "x\n".repeat(10);
        assert!(numbered_source(&many).starts_with(" 1 | x\n"));
    }
}
