//! Unified diffs between a pristine tree and a workspace, and their
//! application. Multi-file patches (including `git diff` output) are split
//! per file before being handed to `diffy`.

use std::fs;
use std::path::Path;

use super::contained_path;

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("malformed patch: {0}")]
    Malformed(String),
    #[error("patch for `{path}` does not apply: {message}")]
    DoesNotApply { path: String, message: String },
    #[error("unsafe path `{0}` in patch")]
    UnsafePath(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &str, e: std::io::Error) -> PatchError {
    PatchError::Io {
        path: path.to_string(),
        message: e.to_string(),
    }
}

/// Unified diff of one file with `a/` and `b/` prefixes; empty when the
/// contents are equal.
pub fn unified_diff(path: &str, original: &str, modified: &str) -> String {
    if original == modified {
        return String::new();
    }
    diffy::DiffOptions::new()
        .set_original_filename(format!("a/{path}"))
        .set_modified_filename(format!("b/{path}"))
        .create_patch(original, modified)
        .to_string()
}

/// Concatenated diffs for `files` (repo-relative), in sorted path order.
/// A file missing on one side diffs against empty content.
pub fn workspace_patch(
    pristine: &Path,
    workspace: &Path,
    files: &[String],
) -> Result<String, PatchError> {
    let mut files = files.to_vec();
    files.sort();
    files.dedup();
    let mut out = String::new();
    for file in &files {
        let read = |root: &Path| -> Result<Option<String>, PatchError> {
            let p = contained_path(root, file).map_err(|_| PatchError::UnsafePath(file.clone()))?;
            match fs::read_to_string(&p) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(io_err(file, e)),
            }
        };
        let before = read(pristine)?;
        let after = read(workspace)?;
        let diff = unified_diff(
            file,
            before.as_deref().unwrap_or(""),
            after.as_deref().unwrap_or(""),
        );
        if diff.is_empty() {
            continue;
        }
        if before.is_none() {
            out.push_str(&diff.replacen(&format!("--- a/{file}"), "--- /dev/null", 1));
        } else if after.is_none() {
            out.push_str(&diff.replacen(&format!("+++ b/{file}"), "+++ /dev/null", 1));
        } else {
            out.push_str(&diff);
        }
    }
    Ok(out)
}

/// One file's section of a multi-file patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilePatch {
    /// `None` for `/dev/null`.
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    /// The `---`/`+++` headers and hunks, suitable for `diffy::Patch::from_str`.
    pub text: String,
}

impl FilePatch {
    pub fn path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or_default()
    }
}

fn header_path(rest: &str) -> Option<String> {
    let name = rest.split('\t').next().unwrap_or(rest).trim_end();
    if name == "/dev/null" {
        return None;
    }
    let stripped = name
        .strip_prefix("a/")
        .or_else(|| name.strip_prefix("b/"))
        .unwrap_or(name);
    Some(stripped.to_string())
}

fn hunk_counts(header: &str) -> Option<(usize, usize)> {
    let body = header.strip_prefix("@@ -")?;
    let (old, rest) = body.split_once(" +")?;
    let (new, _) = rest.split_once(" @@")?;
    let count = |r: &str| -> Option<usize> {
        match r.split_once(',') {
            Some((_, n)) => n.parse().ok(),
            None => Some(1),
        }
    };
    Some((count(old)?, count(new)?))
}

/// Splits a patch into file sections, ignoring preamble such as
/// `diff --git` and `index` lines.
pub fn split_patch(text: &str) -> Result<Vec<FilePatch>, PatchError> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let next_is_plus = lines.get(i + 1).is_some_and(|l| l.starts_with("+++ "));
        if !(line.starts_with("--- ") && next_is_plus) {
            i += 1;
            continue;
        }
        let old_path = header_path(line[4..].trim_end_matches(['\n', '\r']));
        let new_path = header_path(lines[i + 1][4..].trim_end_matches(['\n', '\r']));
        let mut section = String::new();
        section.push_str(line);
        section.push_str(lines[i + 1]);
        i += 2;
        while i < lines.len() && lines[i].starts_with("@@") {
            let (mut old_left, mut new_left) = hunk_counts(lines[i]).ok_or_else(|| {
                PatchError::Malformed(format!("bad hunk header `{}`", lines[i].trim_end()))
            })?;
            section.push_str(lines[i]);
            i += 1;
            while i < lines.len() && (old_left > 0 || new_left > 0 || lines[i].starts_with('\\')) {
                let l = lines[i];
                match l.as_bytes().first() {
                    Some(b' ') => {
                        old_left = old_left.saturating_sub(1);
                        new_left = new_left.saturating_sub(1);
                    }
                    Some(b'-') => old_left = old_left.saturating_sub(1),
                    Some(b'+') => new_left = new_left.saturating_sub(1),
                    Some(b'\\') => {}
                    // Some generators drop the space on empty context lines.
                    Some(b'\n') => {
                        old_left = old_left.saturating_sub(1);
                        new_left = new_left.saturating_sub(1);
                    }
                    _ => {
                        return Err(PatchError::Malformed(format!(
                            "unexpected line in hunk: `{}`",
                            l.trim_end()
                        )))
                    }
                }
                section.push_str(if l == "\n" { " \n" } else { l });
                i += 1;
            }
            if old_left > 0 || new_left > 0 {
                return Err(PatchError::Malformed("hunk ends early".into()));
            }
        }
        if old_path.is_none() && new_path.is_none() {
            return Err(PatchError::Malformed("both sides are /dev/null".into()));
        }
        out.push(FilePatch {
            old_path,
            new_path,
            text: section,
        });
    }
    Ok(out)
}

/// Applies every file section under `root`. Returns the touched paths.
/// Nothing is written unless all sections apply.
pub fn apply_patch(root: &Path, text: &str) -> Result<Vec<String>, PatchError> {
    let sections = split_patch(text)?;
    let mut staged: Vec<(String, Option<String>)> = Vec::new();
    for section in &sections {
        let path = section.path().to_string();
        contained_path(root, &path).map_err(|_| PatchError::UnsafePath(path.clone()))?;
        let base = match &section.old_path {
            None => String::new(),
            Some(old) => {
                let old_full =
                    contained_path(root, old).map_err(|_| PatchError::UnsafePath(old.clone()))?;
                match staged.iter().rev().find(|(p, _)| p == old) {
                    Some((_, content)) => content.clone().unwrap_or_default(),
                    None => fs::read_to_string(&old_full).map_err(|e| io_err(old, e))?,
                }
            }
        };
        let patch = diffy::Patch::from_str(&section.text)
            .map_err(|e| PatchError::Malformed(e.to_string()))?;
        let result = diffy::apply(&base, &patch).map_err(|e| PatchError::DoesNotApply {
            path: path.clone(),
            message: e.to_string(),
        })?;
        staged.push((path, section.new_path.as_ref().map(|_| result)));
    }
    let mut touched = Vec::new();
    for (path, content) in staged {
        let full = contained_path(root, &path).map_err(|_| PatchError::UnsafePath(path.clone()))?;
        match content {
            Some(content) => {
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent).map_err(|e| io_err(&path, e))?;
                }
                fs::write(&full, content).map_err(|e| io_err(&path, e))?;
            }
            None => {
                if full.exists() {
                    fs::remove_file(&full).map_err(|e| io_err(&path, e))?;
                }
            }
        }
        if !touched.contains(&path) {
            touched.push(path);
        }
    }
    Ok(touched)
}
