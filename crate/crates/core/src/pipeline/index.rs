use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::indexer::{
    index_repository, render_repo_map, FileSchematic, IndexConfig, RepoFileMap, SourceParser,
};
use crate::vector::{self, EmbedderConfig, VectorIndex};

pub const REPO_MAP_FILE: &str = "repo_map.json";
pub const SCHEMATICS_FILE: &str = "schematics.json";
pub const META_FILE: &str = "index_meta.json";
pub const INDEX_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub format: u32,
    pub repo_root: PathBuf,
    pub embedder: EmbedderConfig,
    pub embedder_id: String,
    pub file_count: usize,
    pub unit_count: usize,
    pub document_count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum IndexStoreError {
    #[error(transparent)]
    Index(#[from] crate::indexer::IndexError),
    #[error(transparent)]
    Vector(#[from] crate::vector::VectorError),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

fn artifact(path: &Path, e: impl std::fmt::Display) -> IndexStoreError {
    IndexStoreError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub struct LoadedIndex {
    pub meta: IndexMeta,
    pub map: RepoFileMap,
    pub schematics: BTreeMap<String, FileSchematic>,
    pub vectors: VectorIndex,
}

/// Indexes `root` and writes every artifact into `out`.
pub fn build_index(
    root: &Path,
    out: &Path,
    config: &IndexConfig,
    embedder_config: &EmbedderConfig,
    parser: &dyn SourceParser,
) -> Result<(LoadedIndex, Vec<String>), IndexStoreError> {
    let root = fs::canonicalize(root).map_err(|e| artifact(root, e))?;
    let repo = index_repository(&root, config, parser)?;
    let embedder = embedder_config.build();
    let vectors = VectorIndex::build(embedder.as_ref(), &repo.documents)?;
    fs::create_dir_all(out).map_err(|e| artifact(out, e))?;

    let map_path = out.join(REPO_MAP_FILE);
    fs::write(&map_path, render_repo_map(&repo.map) + "\n").map_err(|e| artifact(&map_path, e))?;
    let schematics: Vec<&FileSchematic> = repo.schematics.values().collect();
    let sch_path = out.join(SCHEMATICS_FILE);
    let text = serde_json::to_string_pretty(&schematics).expect("schematics serialize");
    fs::write(&sch_path, text + "\n").map_err(|e| artifact(&sch_path, e))?;
    vector::persist(&vectors, out)?;

    let meta = IndexMeta {
        format: INDEX_FORMAT,
        repo_root: root,
        embedder: embedder_config.clone(),
        embedder_id: embedder.id(),
        file_count: repo.map.file_count(),
        unit_count: repo.schematics.values().map(|s| s.units.len()).sum(),
        document_count: repo.documents.len(),
    };
    let meta_path = out.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| artifact(&meta_path, e))?;

    let warnings = repo
        .warnings
        .iter()
        .map(|w| format!("{}: {}", w.path, w.message))
        .collect();
    Ok((
        LoadedIndex {
            meta,
            map: repo.map,
            schematics: repo.schematics,
            vectors,
        },
        warnings,
    ))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IndexStoreError> {
    let text = fs::read_to_string(path).map_err(|e| artifact(path, e))?;
    serde_json::from_str(&text).map_err(|e| artifact(path, e))
}

pub fn load_index(dir: &Path) -> Result<LoadedIndex, IndexStoreError> {
    let meta: IndexMeta = read_json(&dir.join(META_FILE))?;
    if meta.format != INDEX_FORMAT {
        return Err(artifact(
            &dir.join(META_FILE),
            format!("unsupported index format {}", meta.format),
        ));
    }
    let entries: BTreeMap<String, Vec<String>> = read_json(&dir.join(REPO_MAP_FILE))?;
    let list: Vec<FileSchematic> = read_json(&dir.join(SCHEMATICS_FILE))?;
    let schematics = list.into_iter().map(|s| (s.path.clone(), s)).collect();
    let vectors = vector::load(dir)?;
    if vectors.len() != meta.document_count {
        return Err(artifact(
            &dir.join(META_FILE),
            format!(
                "{} vectors but meta lists {}",
                vectors.len(),
                meta.document_count
            ),
        ));
    }
    Ok(LoadedIndex {
        meta,
        map: RepoFileMap { entries },
        schematics,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indexer::PythonParser;

    #[test]
    fn build_then_load() {
        let repo = tempfile::tempdir().unwrap();
        fs::create_dir_all(repo.path().join("pkg")).unwrap();
        fs::write(repo.path().join("pkg/a.py"), "def f(x):\n    return x\n").unwrap();
        fs::write(
            repo.path().join("top.py"),
            "class C:\n    def m(self):\n        pass\n",
        )
        .unwrap();
        let out = tempfile::tempdir().unwrap();
        let (built, warnings) = build_index(
            repo.path(),
            out.path(),
            &IndexConfig::default(),
            &EmbedderConfig::default(),
            &PythonParser::new(),
        )
        .unwrap();
        assert!(warnings.is_empty());
        assert_eq!(built.meta.document_count, 2);
        for f in [
            REPO_MAP_FILE,
            SCHEMATICS_FILE,
            META_FILE,
            vector::VECTORS_FILE,
            vector::DOCS_FILE,
        ] {
            assert!(out.path().join(f).is_file(), "{f}");
        }
        let loaded = load_index(out.path()).unwrap();
        assert_eq!(loaded.map, built.map);
        assert_eq!(loaded.schematics, built.schematics);
        assert_eq!(loaded.vectors.len(), 2);
        assert_eq!(loaded.meta, built.meta);
        let map = fs::read_to_string(out.path().join(REPO_MAP_FILE)).unwrap();
        assert!(map.contains("\"pkg\": [\n    \"a.py\"\n  ]"));
    }

    #[test]
    fn missing_index_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_index(dir.path()),
            Err(IndexStoreError::Artifact { .. })
        ));
    }
}
