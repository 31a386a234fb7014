//! Image import: every decodable raster in a directory, in path order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::{load_luma, Gray};
use crate::quality::QualityReport;

#[derive(Debug, Clone)]
pub struct ImageAsset {
    pub path: PathBuf,
    /// Unique file-stem used to name derived files.
    pub stem: String,
    pub width: u32,
    pub height: u32,
    pub luma: Gray,
    pub quality: Option<QualityReport>,
}

/// Serializable asset header (without pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetInfo {
    pub path: PathBuf,
    pub stem: String,
    pub width: u32,
    pub height: u32,
}

impl ImageAsset {
    pub fn info(&self) -> AssetInfo {
        AssetInfo {
            path: self.path.clone(),
            stem: self.stem.clone(),
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug)]
pub struct ImportResult {
    pub assets: Vec<ImageAsset>,
    /// One message per file that could not be decoded.
    pub warnings: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImportError {
    #[error("input directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("cannot list {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no decodable images in {0}")]
    Empty(PathBuf),
}

/// Assigns each path a stem unique within the set (`a`, `a_2`, ...).
fn unique_stems(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = std::collections::HashMap::<String, u32>::new();
    paths
        .iter()
        .map(|p| {
            let base = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}_{n}")
            }
        })
        .collect()
}

pub fn import_images(input_dir: &Path) -> Result<ImportResult, ImportError> {
    if !input_dir.is_dir() {
        return Err(ImportError::MissingDir(input_dir.to_path_buf()));
    }
    let io = |source| ImportError::Io {
        path: input_dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(input_dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        if entry.file_type().map_err(io)?.is_file() {
            paths.push(entry.path());
        }
    }
    paths.sort();
    let decoded: Vec<_> = paths.par_iter().map(|p| load_luma(p)).collect();
    let mut ok_paths = Vec::new();
    let mut lumas = Vec::new();
    let mut warnings = Vec::new();
    for (path, res) in paths.into_iter().zip(decoded) {
        match res {
            Ok(g) => {
                ok_paths.push(path);
                lumas.push(g);
            }
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    if ok_paths.is_empty() {
        return Err(ImportError::Empty(input_dir.to_path_buf()));
    }
    let stems = unique_stems(&ok_paths);
    let assets = ok_paths
        .into_iter()
        .zip(stems)
        .zip(lumas)
        .map(|((path, stem), luma)| ImageAsset {
            path,
            stem,
            width: luma.width,
            height: luma.height,
            luma,
            quality: None,
        })
        .collect();
    Ok(ImportResult { assets, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_png;

    #[test]
    fn imports_in_path_order_and_warns() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["c.png", "a.png", "b.png"] {
            save_png(&dir.path().join(name), &Gray::new(4, 3, 9)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
        let res = import_images(dir.path()).unwrap();
        let names: Vec<_> = res.assets.iter().map(|a| a.stem.as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(res.warnings.len(), 1);
        assert!(res.warnings[0].contains("notes.txt"));
        assert_eq!((res.assets[0].width, res.assets[0].height), (4, 3));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            import_images(dir.path()),
            Err(ImportError::Empty(_))
        ));
        assert!(matches!(
            import_images(&dir.path().join("missing")),
            Err(ImportError::MissingDir(_))
        ));
    }

    #[test]
    fn duplicate_stems_disambiguated() {
        let stems = unique_stems(&[
            PathBuf::from("a.jpg"),
            PathBuf::from("a.png"),
            PathBuf::from("b.png"),
        ]);
        assert_eq!(stems, ["a", "a_2", "b"]);
    }
}
