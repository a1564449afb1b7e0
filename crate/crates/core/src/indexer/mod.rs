//! Repository indexing: the directory-level file map, per-file structural
//! schematics, and the method-level documents fed to the vector store.

mod document;
mod python;
mod scan;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use document::{build_embedding_documents, render_document, EmbeddingDocument, UnitRef};
pub use python::PythonParser;
pub use scan::{
    render_repo_map, render_repo_map_within, scan_repository, IndexConfig, RepoFileMap,
    ScanWarning, ROOT_DIR_KEY,
};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("repository root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("invalid exclude pattern `{pattern}`: {message}")]
    BadPattern { pattern: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Function,
    Method,
    Class,
    TopLevel,
}

impl UnitKind {
    /// Functions and methods: the units that get embedding documents.
    pub fn is_callable(self) -> bool {
        matches!(self, UnitKind::Function | UnitKind::Method)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arg {
    pub name: String,
    pub annotation: Option<String>,
    pub default: Option<String>,
}

/// 1-based inclusive line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start_line: usize,
    pub end_line: usize,
}

impl Span {
    pub fn new(start_line: usize, end_line: usize) -> Self {
        Span {
            start_line,
            end_line,
        }
    }

    pub fn contains_line(&self, line: usize) -> bool {
        self.start_line <= line && line <= self.end_line
    }

    pub fn intersects(&self, other: &Span) -> bool {
        self.start_line <= other.end_line && other.start_line <= self.end_line
    }

    pub fn len(&self) -> usize {
        self.end_line + 1 - self.start_line
    }

    pub fn is_empty(&self) -> bool {
        self.end_line < self.start_line
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeUnit {
    pub kind: UnitKind,
    /// Empty for top-level blocks.
    pub name: String,
    /// `Class.method` for methods, the bare name otherwise.
    pub qualified_name: String,
    pub args: Vec<Arg>,
    /// Header text from `def`/`class` through the closing colon.
    pub signature: String,
    pub decorators: Vec<String>,
    pub docstring: Option<String>,
    pub return_statements: Vec<String>,
    /// Includes decorator lines.
    pub span: Span,
    /// Line of the `def`/`class` keyword (equals `span.start_line` when undecorated).
    pub def_line: usize,
    pub parent_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSchematic {
    pub path: String,
    pub units: Vec<CodeUnit>,
    pub parse_ok: bool,
    pub parse_error: Option<String>,
}

impl FileSchematic {
    pub fn failed(path: &str, error: String) -> Self {
        FileSchematic {
            path: path.to_string(),
            units: Vec::new(),
            parse_ok: false,
            parse_error: Some(error),
        }
    }

    /// Classes, functions and methods, skipping top-level statement blocks.
    pub fn definitions(&self) -> impl Iterator<Item = &CodeUnit> {
        self.units.iter().filter(|u| u.kind != UnitKind::TopLevel)
    }
}

/// A syntax error reported by a parser backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("syntax error at line {line}, column {column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// A grammar backend. Only Python ships today.
pub trait SourceParser: Send + Sync {
    /// Structural summary of one file. Never fails; bad input yields `parse_ok = false`.
    fn parse_file(&self, path: &str, source: &str) -> FileSchematic;

    /// Syntax check of a whole module.
    fn check(&self, source: &str) -> Result<(), SyntaxError>;

    /// 1-based lines that begin inside a multi-line string literal. These
    /// lines must never be re-indented.
    fn string_interior_lines(&self, source: &str) -> Vec<usize>;
}

/// Parses raw bytes, reporting non-UTF-8 input as a parse failure.
pub fn parse_bytes(parser: &dyn SourceParser, path: &str, bytes: &[u8]) -> FileSchematic {
    match std::str::from_utf8(bytes) {
        Ok(text) => parser.parse_file(path, text),
        Err(e) => FileSchematic::failed(path, format!("file is not valid UTF-8: {e}")),
    }
}

/// Everything `index` produces for one repository.
#[derive(Debug, Clone)]
pub struct RepoIndex {
    pub map: RepoFileMap,
    pub schematics: BTreeMap<String, FileSchematic>,
    pub documents: Vec<EmbeddingDocument>,
    pub warnings: Vec<ScanWarning>,
}

/// Scans `root`, parses every listed file and renders its documents.
/// Output ordering depends only on paths.
pub fn index_repository(
    root: &Path,
    config: &IndexConfig,
    parser: &dyn SourceParser,
) -> Result<RepoIndex, IndexError> {
    let (map, warnings) = scan_repository(root, config)?;
    let mut schematics = BTreeMap::new();
    for path in map.files() {
        let full = root.join(&path);
        let bytes = std::fs::read(&full).map_err(|source| IndexError::Io {
            path: full.clone(),
            source,
        })?;
        let schematic = parse_bytes(parser, &path, &bytes);
        schematics.insert(path, schematic);
    }
    let documents = schematics
        .values()
        .flat_map(build_embedding_documents)
        .collect();
    Ok(RepoIndex {
        map,
        schematics,
        documents,
        warnings,
    })
}
