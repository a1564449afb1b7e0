//! Python backend on top of tree-sitter-python.
//!
//! Units are the direct children of the module (functions, classes,
//! top-level statement runs) plus the functions defined directly in a class
//! body. Anything nested deeper rides along inside its enclosing span.

use tree_sitter::{Node, Parser, Point, Tree};

use super::{Arg, CodeUnit, FileSchematic, SourceParser, Span, SyntaxError, UnitKind};

#[derive(Debug, Clone, Copy, Default)]
pub struct PythonParser;

impl PythonParser {
    pub fn new() -> Self {
        PythonParser
    }

    fn tree(&self, source: &str) -> Tree {
        let mut parser = Parser::new();
        parser
            .set_language(&tree_sitter_python::LANGUAGE.into())
            .expect("tree-sitter-python grammar is ABI compatible");
        parser
            .parse(source, None)
            .expect("parse without timeout or cancellation")
    }
}

impl SourceParser for PythonParser {
    fn parse_file(&self, path: &str, source: &str) -> FileSchematic {
        let tree = self.tree(source);
        let root = tree.root_node();
        if let Some(err) = syntax_problem(root, source) {
            return FileSchematic::failed(path, err.to_string());
        }
        let mut units = Vec::new();
        let mut run: Option<(Node, Node)> = None;
        let mut cursor = root.walk();
        for child in root.named_children(&mut cursor) {
            match child.kind() {
                "comment" => {}
                "function_definition" | "class_definition" | "decorated_definition" => {
                    if let Some((first, last)) = run.take() {
                        units.push(top_level_unit(first, last));
                    }
                    collect_definition(child, source, None, &mut units);
                }
                _ => {
                    run = Some(match run {
                        Some((first, _)) => (first, child),
                        None => (child, child),
                    });
                }
            }
        }
        if let Some((first, last)) = run.take() {
            units.push(top_level_unit(first, last));
        }
        FileSchematic {
            path: path.to_string(),
            units,
            parse_ok: true,
            parse_error: None,
        }
    }

    fn check(&self, source: &str) -> Result<(), SyntaxError> {
        let tree = self.tree(source);
        match syntax_problem(tree.root_node(), source) {
            Some(err) => Err(err),
            None => Ok(()),
        }
    }

    fn string_interior_lines(&self, source: &str) -> Vec<usize> {
        let tree = self.tree(source);
        let mut lines = Vec::new();
        let mut stack = vec![tree.root_node()];
        while let Some(node) = stack.pop() {
            if node.kind() == "string" {
                let (start, end) = (node.start_position().row, node.end_position().row);
                lines.extend((start + 1..=end).map(|row| row + 1));
                continue;
            }
            let mut cursor = node.walk();
            stack.extend(node.children(&mut cursor));
        }
        lines.sort_unstable();
        lines.dedup();
        lines
    }
}

fn text<'s>(node: Node, source: &'s str) -> &'s str {
    &source[node.byte_range()]
}

fn syntax_problem(root: Node, source: &str) -> Option<SyntaxError> {
    if root.has_error() {
        return Some(first_error(root, source));
    }
    empty_block(root)
}

/// The grammar accepts a block holding only comments; the language does not.
fn empty_block(root: Node) -> Option<SyntaxError> {
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        let mut cursor = node.walk();
        let children: Vec<Node> = node.named_children(&mut cursor).collect();
        if node.kind() == "block" && children.iter().all(|c| c.kind() == "comment") {
            let pos = node.start_position();
            return Some(SyntaxError {
                line: pos.row + 1,
                column: pos.column + 1,
                message: "expected an indented block".to_string(),
            });
        }
        stack.extend(children);
    }
    None
}

fn first_error(root: Node, source: &str) -> SyntaxError {
    let mut stack = vec![root];
    let mut found: Option<Node> = None;
    // Document-order search for the earliest ERROR or MISSING node.
    while let Some(node) = stack.pop() {
        if node.is_error() || node.is_missing() {
            let earlier = found.is_none_or(|f| node.start_byte() < f.start_byte());
            if earlier {
                found = Some(node);
            }
            continue;
        }
        if node.has_error() {
            let mut cursor = node.walk();
            stack.extend(node.children(&mut cursor));
        }
    }
    let Some(node) = found else {
        return SyntaxError {
            line: 1,
            column: 1,
            message: "invalid syntax".to_string(),
        };
    };
    let pos = node.start_position();
    let message = if node.is_missing() {
        format!("missing `{}`", node.kind())
    } else {
        let snippet: String = text(node, source)
            .lines()
            .next()
            .unwrap_or("")
            .chars()
            .take(40)
            .collect();
        if snippet.trim().is_empty() {
            "invalid syntax".to_string()
        } else {
            format!("invalid syntax near `{}`", snippet.trim())
        }
    };
    SyntaxError {
        line: pos.row + 1,
        column: pos.column + 1,
        message,
    }
}

/// End of `node`, ignoring trailing comments that are not indented past
/// `limit_col` (they belong to whatever follows).
fn effective_end(node: Node, limit_col: usize) -> Point {
    let mut cursor = node.walk();
    let children: Vec<Node> = node.children(&mut cursor).collect();
    for child in children.iter().rev() {
        if child.kind() == "comment" && child.start_position().column <= limit_col {
            continue;
        }
        return effective_end(*child, limit_col);
    }
    node.end_position()
}

fn end_line(start: Point, end: Point) -> usize {
    if end.column == 0 && end.row > start.row {
        end.row
    } else {
        end.row + 1
    }
}

fn top_level_unit(first: Node, last: Node) -> CodeUnit {
    let start = first.start_position();
    let end = effective_end(last, 0);
    let span = Span::new(start.row + 1, end_line(start, end));
    CodeUnit {
        kind: UnitKind::TopLevel,
        name: String::new(),
        qualified_name: String::new(),
        args: Vec::new(),
        signature: String::new(),
        decorators: Vec::new(),
        docstring: None,
        return_statements: Vec::new(),
        span,
        def_line: span.start_line,
        parent_class: None,
    }
}

/// Emits the unit for `node` (a plain or decorated definition) and, for
/// top-level classes, the units of its directly defined methods.
fn collect_definition(node: Node, source: &str, parent: Option<&str>, out: &mut Vec<CodeUnit>) {
    let (decorators, def) = if node.kind() == "decorated_definition" {
        let mut cursor = node.walk();
        let decorators = node
            .named_children(&mut cursor)
            .filter(|c| c.kind() == "decorator")
            .map(|c| text(c, source).to_string())
            .collect();
        match node.child_by_field_name("definition") {
            Some(def) => (decorators, def),
            None => return,
        }
    } else {
        (Vec::new(), node)
    };
    let Some(name_node) = def.child_by_field_name("name") else {
        return;
    };
    let Some(body) = def.child_by_field_name("body") else {
        return;
    };
    let name = text(name_node, source).to_string();
    let start = node.start_position();
    let end = effective_end(node, start.column);
    let span = Span::new(start.row + 1, end_line(start, end));

    let is_class = def.kind() == "class_definition";
    if is_class && parent.is_some() {
        // Nested classes fold into the enclosing class.
        return;
    }
    let kind = match (is_class, parent) {
        (true, _) => UnitKind::Class,
        (false, Some(_)) => UnitKind::Method,
        (false, None) => UnitKind::Function,
    };
    let qualified_name = match parent {
        Some(p) => format!("{p}.{name}"),
        None => name.clone(),
    };
    let args = if is_class {
        Vec::new()
    } else {
        def.child_by_field_name("parameters")
            .map(|p| parameters(p, source))
            .unwrap_or_default()
    };
    let return_statements = if is_class {
        Vec::new()
    } else {
        let mut found = Vec::new();
        collect_returns(body, source, &mut found);
        found
    };
    out.push(CodeUnit {
        kind,
        name: name.clone(),
        qualified_name,
        args,
        signature: signature(def, body, source),
        decorators,
        docstring: docstring(body, source),
        return_statements,
        span,
        def_line: def.start_position().row + 1,
        parent_class: parent.map(str::to_string),
    });

    if is_class {
        let mut cursor = body.walk();
        for member in body.named_children(&mut cursor) {
            let is_function = match member.kind() {
                "function_definition" => true,
                "decorated_definition" => member
                    .child_by_field_name("definition")
                    .is_some_and(|d| d.kind() == "function_definition"),
                _ => false,
            };
            if is_function {
                collect_definition(member, source, Some(&name), out);
            }
        }
    }
}

fn signature(def: Node, body: Node, source: &str) -> String {
    let mut end = body.start_byte();
    let mut cursor = def.walk();
    for child in def.children(&mut cursor) {
        if child.start_byte() >= body.start_byte() {
            break;
        }
        if child.kind() == ":" {
            end = child.end_byte();
        }
    }
    source[def.start_byte()..end].trim_end().to_string()
}

fn parameters(params: Node, source: &str) -> Vec<Arg> {
    let mut args = Vec::new();
    let mut cursor = params.walk();
    for p in params.named_children(&mut cursor) {
        let arg = match p.kind() {
            "identifier" => Some(Arg {
                name: text(p, source).to_string(),
                annotation: None,
                default: None,
            }),
            "list_splat_pattern" | "dictionary_splat_pattern" => {
                splat_name(p, source).map(|name| Arg {
                    name,
                    annotation: None,
                    default: None,
                })
            }
            "typed_parameter" => {
                let mut c = p.walk();
                let first = p.named_children(&mut c).next();
                let name = first.and_then(|n| match n.kind() {
                    "identifier" => Some(text(n, source).to_string()),
                    _ => splat_name(n, source),
                });
                name.map(|name| Arg {
                    name,
                    annotation: p
                        .child_by_field_name("type")
                        .map(|t| text(t, source).to_string()),
                    default: None,
                })
            }
            "default_parameter" | "typed_default_parameter" => {
                p.child_by_field_name("name").map(|n| Arg {
                    name: text(n, source).to_string(),
                    annotation: p
                        .child_by_field_name("type")
                        .map(|t| text(t, source).to_string()),
                    default: p
                        .child_by_field_name("value")
                        .map(|v| text(v, source).to_string()),
                })
            }
            // `*` and `/` separators, comments.
            _ => None,
        };
        args.extend(arg);
    }
    args
}

fn splat_name(node: Node, source: &str) -> Option<String> {
    let mut cursor = node.walk();
    let name = node
        .named_children(&mut cursor)
        .find(|c| c.kind() == "identifier")
        .map(|c| text(c, source).to_string());
    name
}

fn docstring(body: Node, source: &str) -> Option<String> {
    let mut cursor = body.walk();
    let first = body
        .named_children(&mut cursor)
        .find(|c| c.kind() != "comment")?;
    if first.kind() != "expression_statement" || first.named_child_count() != 1 {
        return None;
    }
    let string = first.named_child(0)?;
    if string.kind() != "string" {
        return None;
    }
    let mut c = string.walk();
    let parts: Vec<Node> = string.children(&mut c).collect();
    let open = parts.iter().find(|n| n.kind() == "string_start")?;
    let close = parts.iter().rev().find(|n| n.kind() == "string_end")?;
    let prefix = text(*open, source)
        .trim_end_matches(['"', '\''])
        .to_ascii_lowercase();
    if prefix.contains('f') || prefix.contains('b') {
        return None;
    }
    Some(
        source[open.end_byte()..close.start_byte()]
            .trim()
            .to_string(),
    )
}

fn collect_returns(node: Node, source: &str, out: &mut Vec<String>) {
    let mut cursor = node.walk();
    for child in node.named_children(&mut cursor) {
        match child.kind() {
            "function_definition" | "class_definition" | "decorated_definition" | "lambda" => {}
            "return_statement" => {
                let mut c = child.walk();
                let expr = child.named_children(&mut c).find(|n| n.kind() != "comment");
                if let Some(expr) = expr {
                    out.push(text(expr, source).to_string());
                }
            }
            _ => collect_returns(child, source, out),
        }
    }
}
