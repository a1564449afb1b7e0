//! Scratch copies of the pristine checkout, one per candidate.

use std::collections::BTreeMap;
use std::ffi::CString;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("pristine checkout {0} is not a directory")]
    MissingPristine(PathBuf),
    #[error("workspace {0} already exists and is not empty")]
    NotEmpty(PathBuf),
    #[error("insufficient disk space under {path}: need {needed} bytes, {available} available")]
    InsufficientDisk {
        path: PathBuf,
        needed: u64,
        available: u64,
    },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Removes the workspace; a second call is a no-op.
    pub fn destroy(&self) -> Result<(), WorkspaceError> {
        match fs::remove_dir_all(&self.root) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&self.root)(e)),
        }
    }
}

/// Copies `pristine` to `dest` file by file. Symlinks are recreated, not
/// followed. If `dest` lies inside `pristine` it is left out of the copy.
pub fn create_scratch(pristine: &Path, dest: &Path) -> Result<Workspace, WorkspaceError> {
    if !pristine.is_dir() {
        return Err(WorkspaceError::MissingPristine(pristine.to_path_buf()));
    }
    if dest.exists() && fs::read_dir(dest).map_err(io_err(dest))?.next().is_some() {
        return Err(WorkspaceError::NotEmpty(dest.to_path_buf()));
    }
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let dest_abs = fs::canonicalize(dest).map_err(io_err(dest))?;
    let walker = WalkDir::new(pristine)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| fs::canonicalize(e.path()).map_or(true, |p| p != dest_abs));
    for entry in walker {
        let entry = entry.map_err(|e| WorkspaceError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_default(),
            source: e
                .into_io_error()
                .unwrap_or_else(|| io::Error::other("walk error")),
        })?;
        let rel = entry
            .path()
            .strip_prefix(pristine)
            .expect("walk stays under root");
        if rel.as_os_str().is_empty() {
            continue;
        }
        let target = dest.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target).map_err(io_err(&target))?;
        } else if ft.is_symlink() {
            let link = fs::read_link(entry.path()).map_err(io_err(entry.path()))?;
            std::os::unix::fs::symlink(link, &target).map_err(io_err(&target))?;
        } else {
            fs::copy(entry.path(), &target).map_err(io_err(&target))?;
        }
    }
    Ok(Workspace {
        root: dest.to_path_buf(),
    })
}

/// Repo-relative path to sha256 hex for every regular file under `root`.
pub fn tree_hashes(root: &Path) -> Result<BTreeMap<String, String>, WorkspaceError> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|e| WorkspaceError::Io {
            path: root.to_path_buf(),
            source: e
                .into_io_error()
                .unwrap_or_else(|| io::Error::other("walk error")),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(io_err(entry.path()))?;
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walk stays under root")
            .to_string_lossy()
            .replace('\\', "/");
        out.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

/// Total size of regular files under `root`.
pub fn dir_size(root: &Path) -> u64 {
    WalkDir::new(root)
        .follow_links(false)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| e.metadata().ok())
        .map(|m| m.len())
        .sum()
}

/// Bytes available to unprivileged users on the filesystem holding `path`.
pub fn available_space(path: &Path) -> Option<u64> {
    let c = CString::new(path.as_os_str().as_bytes()).ok()?;
    let mut stat: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `stat` is writable.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut stat) };
    if rc != 0 {
        return None;
    }
    Some(stat.f_bavail as u64 * stat.f_frsize as u64)
}

/// Fails when `copies` scratch copies of `pristine` would not fit under `dest_parent`.
pub fn ensure_space(
    pristine: &Path,
    dest_parent: &Path,
    copies: usize,
) -> Result<(), WorkspaceError> {
    let needed = dir_size(pristine).saturating_mul(copies as u64);
    let probe = dest_parent
        .ancestors()
        .find(|p| p.exists())
        .unwrap_or(Path::new("."));
    match available_space(probe) {
        Some(available) if available < needed => Err(WorkspaceError::InsufficientDisk {
            path: probe.to_path_buf(),
            needed,
            available,
        }),
        _ => Ok(()),
    }
}
