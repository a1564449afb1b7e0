use serde::{Deserialize, Serialize};

use super::{CodeUnit, FileSchematic};

/// Placeholder used for absent docstrings, decorators and return statements.
const ABSENT: &str = "None";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitRef {
    pub qualified_name: String,
    pub start_line: usize,
}

/// The retrieval unit: one method or function rendered as prose, plus the
/// metadata needed to map a hit back to its file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDocument {
    pub document: String,
    pub file_name: String,
    pub parent_class: Option<String>,
    pub unit_ref: UnitRef,
}

fn render_args(unit: &CodeUnit) -> String {
    let names: Vec<String> = unit.args.iter().map(|a| format!("'{}'", a.name)).collect();
    format!("[{}]", names.join(", "))
}

fn or_absent(parts: &[String], sep: &str) -> String {
    if parts.is_empty() {
        ABSENT.to_string()
    } else {
        parts.join(sep)
    }
}

/// Fills the method template for one unit.
pub fn render_document(unit: &CodeUnit) -> String {
    format!(
        "Method {name} with arguments {args} have signature as {signature} is described using {docstring} also have {decorators} as decorators and return statement described as {returns}.",
        name = unit.name,
        args = render_args(unit),
        signature = unit.signature,
        docstring = unit.docstring.as_deref().unwrap_or(ABSENT),
        decorators = or_absent(&unit.decorators, ", "),
        returns = or_absent(&unit.return_statements, "; "),
    )
}

/// One document per function or method, in source order.
pub fn build_embedding_documents(schematic: &FileSchematic) -> Vec<EmbeddingDocument> {
    if !schematic.parse_ok {
        return Vec::new();
    }
    schematic
        .units
        .iter()
        .filter(|u| u.kind.is_callable())
        .map(|unit| EmbeddingDocument {
            document: render_document(unit),
            file_name: schematic.path.clone(),
            parent_class: unit.parent_class.clone(),
            unit_ref: UnitRef {
                qualified_name: unit.qualified_name.clone(),
                start_line: unit.span.start_line,
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indexer::{PythonParser, SourceParser};

    #[test]
    fn method_document_prefix_and_metadata() {
        let s =
            PythonParser::new().parse_file("pkg/a.py", "class A:\n    def f(self, x): return x\n");
        let docs = build_embedding_documents(&s);
        assert_eq!(docs.len(), 1);
        assert!(docs[0].document.starts_with(
            "Method f with arguments ['self', 'x'] have signature as def f(self, x):"
        ));
        assert_eq!(docs[0].parent_class.as_deref(), Some("A"));
        assert_eq!(docs[0].file_name, "pkg/a.py");
        assert_eq!(
            docs[0].unit_ref,
            UnitRef {
                qualified_name: "A.f".into(),
                start_line: 2
            }
        );
    }

    #[test]
    fn absent_fields_render_none() {
        let s = PythonParser::new().parse_file("m.py", "def g():\n    pass\n");
        let doc = &build_embedding_documents(&s)[0].document;
        assert_eq!(
            doc,
            "Method g with arguments [] have signature as def g(): is described using None also have None as decorators and return statement described as None."
        );
    }

    #[test]
    fn empty_or_failed_schematics_give_nothing() {
        let p = PythonParser::new();
        assert!(build_embedding_documents(&p.parse_file("e.py", "")).is_empty());
        assert!(build_embedding_documents(&p.parse_file("b.py", "def f(")).is_empty());
    }

    #[test]
    fn multiple_returns_join_with_semicolons() {
        let s = PythonParser::new().parse_file(
            "m.py",
            "@a\n@b.c\ndef h(x):\n    if x:\n        return 1\n    return 2\n",
        );
        let doc = &build_embedding_documents(&s)[0].document;
        assert!(doc
            .ends_with("also have @a, @b.c as decorators and return statement described as 1; 2."));
    }
}
