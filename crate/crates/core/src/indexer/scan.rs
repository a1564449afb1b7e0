use std::collections::BTreeMap;
use std::path::Path;

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::IndexError;

/// Map key under which files directly in the repository root are listed.
pub const ROOT_DIR_KEY: &str = ".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    /// Extensions including the leading dot.
    pub extensions: Vec<String>,
    /// Directory names skipped wherever they occur.
    pub exclude_dirs: Vec<String>,
    /// Globs matched against `/`-separated repo-relative paths.
    pub exclude_globs: Vec<String>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            extensions: vec![".py".to_string()],
            exclude_dirs: [
                ".git",
                "__pycache__",
                "venv",
                ".venv",
                "build",
                "dist",
                "node_modules",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            exclude_globs: Vec::new(),
        }
    }
}

/// Directory (repo-relative, `/`-separated) to the sorted source filenames it holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RepoFileMap {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl RepoFileMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All repo-relative file paths, sorted by directory then filename.
    pub fn files(&self) -> Vec<String> {
        self.entries
            .iter()
            .flat_map(|(dir, names)| names.iter().map(move |n| join(dir, n)))
            .collect()
    }

    pub fn contains(&self, path: &str) -> bool {
        let (dir, name) = match path.rsplit_once('/') {
            Some((d, n)) => (d, n),
            None => (ROOT_DIR_KEY, path),
        };
        self.entries
            .get(dir)
            .is_some_and(|names| names.binary_search_by(|n| n.as_str().cmp(name)).is_ok())
    }

    pub fn file_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

fn join(dir: &str, name: &str) -> String {
    if dir == ROOT_DIR_KEY {
        name.to_string()
    } else {
        format!("{dir}/{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanWarning {
    pub path: String,
    pub message: String,
}

fn build_globs(patterns: &[String]) -> Result<GlobSet, IndexError> {
    let mut builder = GlobSetBuilder::new();
    for pattern in patterns {
        let glob = Glob::new(pattern).map_err(|e| IndexError::BadPattern {
            pattern: pattern.clone(),
            message: e.to_string(),
        })?;
        builder.add(glob);
    }
    builder.build().map_err(|e| IndexError::BadPattern {
        pattern: patterns.join(","),
        message: e.to_string(),
    })
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Recursively lists source files under `root`. Unreadable directories are
/// reported as warnings and skipped.
pub fn scan_repository(
    root: &Path,
    config: &IndexConfig,
) -> Result<(RepoFileMap, Vec<ScanWarning>), IndexError> {
    if !root.is_dir() {
        return Err(IndexError::MissingRoot(root.to_path_buf()));
    }
    let globs = build_globs(&config.exclude_globs)?;
    let mut map = RepoFileMap::default();
    let mut warnings = Vec::new();

    let walker = WalkDir::new(root)
        .follow_links(false)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|entry| {
            if entry.depth() == 0 {
                return true;
            }
            let rel = relative(root, entry.path());
            if globs.is_match(&rel) {
                return false;
            }
            !(entry.file_type().is_dir()
                && config
                    .exclude_dirs
                    .iter()
                    .any(|d| entry.file_name().to_string_lossy() == d.as_str()))
        });

    for entry in walker {
        let entry = match entry {
            Ok(e) => e,
            Err(err) => {
                let path = err.path().map(|p| relative(root, p)).unwrap_or_default();
                tracing::warn!(%path, error = %err, "skipping unreadable path");
                warnings.push(ScanWarning {
                    path,
                    message: err.to_string(),
                });
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        if !config
            .extensions
            .iter()
            .any(|ext| name.ends_with(ext.as_str()))
        {
            continue;
        }
        let rel = relative(root, entry.path());
        let dir = match rel.rsplit_once('/') {
            Some((d, _)) => d.to_string(),
            None => ROOT_DIR_KEY.to_string(),
        };
        map.entries.entry(dir).or_default().push(name);
    }
    for names in map.entries.values_mut() {
        names.sort();
    }
    Ok((map, warnings))
}

/// Pretty JSON with sorted keys; identical input gives identical bytes.
pub fn render_repo_map(map: &RepoFileMap) -> String {
    if map.is_empty() {
        return "{}".to_string();
    }
    serde_json::to_string_pretty(&map.entries).expect("string map serializes")
}

/// Renders the map, dropping the deepest directories until the output fits
/// in `max_chars`. Returns the text and whether anything was dropped.
pub fn render_repo_map_within(map: &RepoFileMap, max_chars: usize) -> (String, bool) {
    let full = render_repo_map(map);
    if full.len() <= max_chars {
        return (full, false);
    }
    let depth = |dir: &str| {
        if dir == ROOT_DIR_KEY {
            0
        } else {
            dir.split('/').count()
        }
    };
    let mut max_depth = map.entries.keys().map(|k| depth(k)).max().unwrap_or(0);
    loop {
        let kept = RepoFileMap {
            entries: map
                .entries
                .iter()
                .filter(|(k, _)| depth(k) <= max_depth)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        let text = render_repo_map(&kept);
        if text.len() <= max_chars || max_depth == 0 {
            return (text, true);
        }
        max_depth -= 1;
    }
}
