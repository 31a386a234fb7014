//! `dagrun.cfg`: the run configuration shared by every pipeline task.
//!
//! The file is line oriented: `[section]` headers, `key = value` pairs and
//! full-line `#` comments. Booleans are `true`/`false`; lists are
//! comma-separated. Only `project.input_dir` is required. Unknown sections
//! and keys produce warnings and are otherwise ignored.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Point cloud, tiled model and mesh are all derived from the depth maps.
    DepthMapsDirect,
    /// The point cloud is built first and is the source of the tiled model
    /// and the mesh, which is then textured.
    PointCloudFirst,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DepthMapsDirect => "depth_maps_direct",
            Variant::PointCloudFirst => "point_cloud_first",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PointCloudFormat {
    PlyAscii,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MeshFormat {
    Obj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskFormat {
    Png8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub name: String,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotogrammetryConfig {
    pub variant: Variant,
    pub blur_variance_min: f64,
    pub overexposed_pixel_value: u8,
    pub underexposed_pixel_value: u8,
    pub exposure_fraction_max: f64,
    pub grid_resolution: u32,
}

impl Default for PhotogrammetryConfig {
    fn default() -> Self {
        PhotogrammetryConfig {
            variant: Variant::DepthMapsDirect,
            blur_variance_min: 100.0,
            overexposed_pixel_value: 250,
            underexposed_pixel_value: 5,
            exposure_fraction_max: 0.30,
            grid_resolution: 100,
        }
    }
}

pub const DEFAULT_CLASS_NAMES: [&str; 10] = [
    "background",
    "building-flooded",
    "building-non-flooded",
    "road-flooded",
    "road-non-flooded",
    "water",
    "tree",
    "vehicle",
    "pool",
    "grass",
];

/// Masks are stored as 8-bit PNGs, so labels must fit in a byte.
pub const MAX_CLASS_COUNT: u32 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlConfig {
    pub enabled: bool,
    pub class_count: u32,
    pub class_names: Vec<String>,
    pub target_long_side_px: u32,
    pub batch_size: u32,
}

impl Default for MlConfig {
    fn default() -> Self {
        MlConfig {
            enabled: true,
            class_count: DEFAULT_CLASS_NAMES.len() as u32,
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            target_long_side_px: 1024,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    pub point_cloud_format: PointCloudFormat,
    pub mesh_format: MeshFormat,
    pub mask_format: MaskFormat,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            point_cloud_format: PointCloudFormat::PlyAscii,
            mesh_format: MeshFormat::Obj,
            mask_format: MaskFormat::Png8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourcesConfig {
    pub cpus: u32,
    pub memory_mb: u64,
    pub gpus: u32,
}

impl Default for ResourcesConfig {
    fn default() -> Self {
        ResourcesConfig {
            cpus: 1,
            memory_mb: 4096,
            gpus: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub project: ProjectConfig,
    pub photogrammetry: PhotogrammetryConfig,
    pub ml: MlConfig,
    pub export: ExportConfig,
    pub resources: ResourcesConfig,
}

impl RunConfig {
    /// A configuration with every optional key at its default.
    pub fn with_input_dir(input_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            project: ProjectConfig {
                name: "project".into(),
                input_dir: input_dir.into(),
                output_dir: PathBuf::from("output"),
            },
            photogrammetry: PhotogrammetryConfig::default(),
            ml: MlConfig::default(),
            export: ExportConfig::default(),
            resources: ResourcesConfig::default(),
        }
    }

    /// Checks the value invariants that parsing enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| {
            Err(ConfigError::Invalid {
                key: key.to_string(),
                message,
            })
        };
        let p = &self.photogrammetry;
        if !(p.blur_variance_min.is_finite() && p.blur_variance_min >= 0.0) {
            return invalid(
                "photogrammetry.blur_variance_min",
                "must be a non-negative number".into(),
            );
        }
        if p.underexposed_pixel_value >= p.overexposed_pixel_value {
            return invalid(
                "photogrammetry.underexposed_pixel_value",
                format!(
                    "must be below overexposed_pixel_value ({})",
                    p.overexposed_pixel_value
                ),
            );
        }
        if !(0.0..=1.0).contains(&p.exposure_fraction_max) {
            return invalid(
                "photogrammetry.exposure_fraction_max",
                "must lie in [0, 1]".into(),
            );
        }
        if p.grid_resolution == 0 {
            return invalid("photogrammetry.grid_resolution", "must be positive".into());
        }
        let ml = &self.ml;
        if ml.class_count < 2 || ml.class_count > MAX_CLASS_COUNT {
            return invalid(
                "ml.class_count",
                format!("must lie in [2, {MAX_CLASS_COUNT}]"),
            );
        }
        if ml.class_names.len() != ml.class_count as usize {
            return invalid(
                "ml.class_names",
                format!(
                    "{} names given for class_count {}",
                    ml.class_names.len(),
                    ml.class_count
                ),
            );
        }
        let mut seen = HashSet::new();
        for name in &ml.class_names {
            if !is_valid_class_name(name) {
                return invalid("ml.class_names", format!("invalid class name {name:?}"));
            }
            if !seen.insert(name.as_str()) {
                return invalid("ml.class_names", format!("duplicate class name {name:?}"));
            }
        }
        if ml.target_long_side_px == 0 {
            return invalid("ml.target_long_side_px", "must be positive".into());
        }
        if ml.batch_size == 0 {
            return invalid("ml.batch_size", "must be positive".into());
        }
        if self.resources.cpus == 0 {
            return invalid("resources.cpus", "must be positive".into());
        }
        if self.resources.memory_mb == 0 {
            return invalid("resources.memory_mb", "must be positive".into());
        }
        Ok(())
    }

    /// Run-start check: the input directory must exist and be readable.
    pub fn check_input_dir(&self) -> Result<(), ConfigError> {
        std::fs::read_dir(&self.project.input_dir)
            .map(|_| ())
            .map_err(|e| ConfigError::Invalid {
                key: "project.input_dir".into(),
                message: format!("{}: {e}", self.project.input_dir.display()),
            })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.project;
        let _ = writeln!(out, "[project]");
        let _ = writeln!(out, "name = {}", p.name);
        let _ = writeln!(out, "input_dir = {}", p.input_dir.display());
        let _ = writeln!(out, "output_dir = {}", p.output_dir.display());
        let g = &self.photogrammetry;
        let _ = writeln!(out, "\n[photogrammetry]");
        let _ = writeln!(out, "variant = {}", g.variant.as_str());
        let _ = writeln!(out, "blur_variance_min = {:?}", g.blur_variance_min);
        let _ = writeln!(
            out,
            "overexposed_pixel_value = {}",
            g.overexposed_pixel_value
        );
        let _ = writeln!(
            out,
            "underexposed_pixel_value = {}",
            g.underexposed_pixel_value
        );
        let _ = writeln!(out, "exposure_fraction_max = {:?}", g.exposure_fraction_max);
        let _ = writeln!(out, "grid_resolution = {}", g.grid_resolution);
        let m = &self.ml;
        let _ = writeln!(out, "\n[ml]");
        let _ = writeln!(out, "enabled = {}", m.enabled);
        let _ = writeln!(out, "class_count = {}", m.class_count);
        let _ = writeln!(out, "class_names = {}", m.class_names.join(", "));
        let _ = writeln!(out, "target_long_side_px = {}", m.target_long_side_px);
        let _ = writeln!(out, "batch_size = {}", m.batch_size);
        let _ = writeln!(out, "\n[export]");
        let _ = writeln!(out, "point_cloud_format = ply_ascii");
        let _ = writeln!(out, "mesh_format = obj");
        let _ = writeln!(out, "mask_format = png8");
        let r = &self.resources;
        let _ = writeln!(out, "\n[resources]");
        let _ = writeln!(out, "cpus = {}", r.cpus);
        let _ = writeln!(out, "memory_mb = {}", r.memory_mb);
        let _ = writeln!(out, "gpus = {}", r.gpus);
        out
    }
}

/// Class names become file-name components, so path separators and list
/// delimiters are excluded.
pub fn is_valid_class_name(name: &str) -> bool {
    !name.is_empty()
        && name.trim() == name
        && !name.contains(['/', '\\', ',', '\0'])
        && name != "."
        && name != ".."
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid value for '{key}': {message}")]
    Invalid { key: String, message: String },
    #[error("missing required key '{key}'")]
    MissingKey { key: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigWarning {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: RunConfig,
    pub warnings: Vec<ConfigWarning>,
}

const SECTIONS: [&str; 5] = ["project", "photogrammetry", "ml", "export", "resources"];

pub fn parse_config(text: &str) -> Result<ParsedConfig, ConfigError> {
    let mut config = RunConfig::with_input_dir("");
    let mut input_dir_set = false;
    let mut class_count_set = false;
    let mut class_names_set = false;
    let mut warnings = Vec::new();
    let mut section: Option<String> = None;
    let mut seen_keys: HashSet<String> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                message: "unterminated section header".into(),
            })?;
            let name = name.trim().to_string();
            if !SECTIONS.contains(&name.as_str()) {
                warnings.push(ConfigWarning {
                    line: line_no,
                    message: format!("unknown section [{name}]"),
                });
            }
            section = Some(name);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            message: "expected 'key = value' or '[section]'".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        let sec = section.as_deref().ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            message: format!("key '{key}' appears before any section"),
        })?;
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: "empty key".into(),
            });
        }
        let full = format!("{sec}.{key}");
        if !seen_keys.insert(full.clone()) {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: format!("duplicate key '{full}'"),
            });
        }

        let c = &mut config;
        match full.as_str() {
            "project.name" => c.project.name = value.to_string(),
            "project.input_dir" => {
                if value.is_empty() {
                    return Err(invalid(&full, "must not be empty"));
                }
                c.project.input_dir = PathBuf::from(value);
                input_dir_set = true;
            }
            "project.output_dir" => {
                if value.is_empty() {
                    return Err(invalid(&full, "must not be empty"));
                }
                c.project.output_dir = PathBuf::from(value)
            }
            "photogrammetry.variant" => {
                c.photogrammetry.variant = match value.to_ascii_lowercase().as_str() {
                    "depth_maps_direct" => Variant::DepthMapsDirect,
                    "point_cloud_first" => Variant::PointCloudFirst,
                    _ => {
                        return Err(invalid(
                            &full,
                            "expected depth_maps_direct or point_cloud_first",
                        ))
                    }
                }
            }
            "photogrammetry.blur_variance_min" => {
                c.photogrammetry.blur_variance_min = number(&full, value)?
            }
            "photogrammetry.overexposed_pixel_value" => {
                c.photogrammetry.overexposed_pixel_value = number(&full, value)?
            }
            "photogrammetry.underexposed_pixel_value" => {
                c.photogrammetry.underexposed_pixel_value = number(&full, value)?
            }
            "photogrammetry.exposure_fraction_max" => {
                c.photogrammetry.exposure_fraction_max = number(&full, value)?
            }
            "photogrammetry.grid_resolution" => {
                c.photogrammetry.grid_resolution = number(&full, value)?
            }
            "ml.enabled" => c.ml.enabled = boolean(&full, value)?,
            "ml.class_count" => {
                c.ml.class_count = number(&full, value)?;
                class_count_set = true;
            }
            "ml.class_names" => {
                c.ml.class_names = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
                class_names_set = true;
            }
            "ml.target_long_side_px" => c.ml.target_long_side_px = number(&full, value)?,
            "ml.batch_size" => c.ml.batch_size = number(&full, value)?,
            "export.point_cloud_format" => {
                if !value.eq_ignore_ascii_case("ply_ascii") {
                    return Err(invalid(&full, "only ply_ascii is supported"));
                }
            }
            "export.mesh_format" => {
                if !value.eq_ignore_ascii_case("obj") {
                    return Err(invalid(&full, "only obj is supported"));
                }
            }
            "export.mask_format" => {
                if !value.eq_ignore_ascii_case("png8") {
                    return Err(invalid(&full, "only png8 is supported"));
                }
            }
            "resources.cpus" => c.resources.cpus = number(&full, value)?,
            "resources.memory_mb" => c.resources.memory_mb = number(&full, value)?,
            "resources.gpus" => c.resources.gpus = number(&full, value)?,
            _ => warnings.push(ConfigWarning {
                line: line_no,
                message: format!("unknown key '{full}'"),
            }),
        }
    }

    if !input_dir_set {
        return Err(ConfigError::MissingKey {
            key: "project.input_dir".into(),
        });
    }
    // A custom class count without names gets generic ones; names without a
    // count imply the count.
    match (class_count_set, class_names_set) {
        (true, false) => {
            config.ml.class_names = (0..config.ml.class_count)
                .map(|i| {
                    DEFAULT_CLASS_NAMES
                        .get(i as usize)
                        .filter(|_| config.ml.class_count as usize == DEFAULT_CLASS_NAMES.len())
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("class{i}"))
                })
                .collect();
        }
        (false, true) => config.ml.class_count = config.ml.class_names.len() as u32,
        _ => {}
    }
    config.validate()?;
    Ok(ParsedConfig { config, warnings })
}

fn invalid(key: &str, message: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.to_string(),
    }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.to_string(),
        message: format!("cannot parse {value:?}"),
    })
}

fn boolean(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, "expected true or false")),
    }
}

/// Output directory for one run's exported artifacts.
pub fn run_output_dir(config: &RunConfig, run_id: &str) -> PathBuf {
    config.project.output_dir.join(run_id)
}
