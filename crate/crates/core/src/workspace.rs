//! Per-run scratch directories and file digests.

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default root for run workspaces.
pub fn default_root() -> PathBuf {
    std::env::temp_dir().join("flowgate")
}

/// Creates `<root>/<run_id>`; fails if it already exists.
pub fn create(root: &Path, run_id: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let dir = root.join(run_id);
    fs::create_dir(&dir)?;
    Ok(dir)
}

pub fn remove(dir: &Path) -> io::Result<()> {
    cleanup(dir).map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanupReport {
    pub path: PathBuf,
    /// False when there was nothing left to remove.
    pub removed: bool,
}

/// Removes `dir` recursively. A missing directory is a no-op report.
pub fn cleanup(dir: &Path) -> io::Result<CleanupReport> {
    let removed = match fs::remove_dir_all(dir) {
        Ok(()) => true,
        Err(e) if e.kind() == io::ErrorKind::NotFound => false,
        Err(e) => return Err(e),
    };
    Ok(CleanupReport {
        path: dir.to_path_buf(),
        removed,
    })
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the listed directory, with `/` separators.
    pub path: String,
    pub size: u64,
    pub sha256: String,
}

/// Every regular file under `dir`, sorted by relative path.
pub fn list_files(dir: &Path) -> io::Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let path = entry.path();
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(path);
            } else if ty.is_file() {
                let rel = path
                    .strip_prefix(dir)
                    .expect("under dir")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push(FileEntry {
                    path: rel,
                    size: entry.metadata()?.len(),
                    sha256: sha256_file(&path)?,
                });
            }
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}
