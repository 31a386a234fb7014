//! Segmentation post-processing: downscale, batched inference through an
//! adapter, validation, nearest-neighbor upscale, per-class binary masks and
//! projection of mask labels onto the point cloud.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowgate_core::workspace::{list_files, FileEntry};

use crate::imaging::Gray;
use crate::recon::{PointCloud, SparseAlignment};

pub const STAGE_DOWNSCALED: &str = "downscaled";
pub const STAGE_MASKS_RAW: &str = "masks_raw";
pub const STAGE_MASKS_FULL: &str = "masks_full";
pub const STAGE_MASKS_BINARY: &str = "masks_binary";
pub const STAGES: [&str; 4] = [
    STAGE_DOWNSCALED,
    STAGE_MASKS_RAW,
    STAGE_MASKS_FULL,
    STAGE_MASKS_BINARY,
];
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub width: u32,
    pub height: u32,
    /// Row-major class labels.
    pub labels: Vec<u32>,
    pub class_count: u32,
}

impl SegmentationMask {
    pub fn uniform(width: u32, height: u32, label: u32, class_count: u32) -> Self {
        SegmentationMask {
            width,
            height,
            labels: vec![label; width as usize * height as usize],
            class_count,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    /// 8-bit raster with pixel value = class id. Labels must fit in a byte.
    pub fn to_gray(&self) -> Gray {
        Gray {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| l as u8).collect(),
        }
    }

    pub fn from_gray(g: &Gray, class_count: u32) -> Self {
        SegmentationMask {
            width: g.width,
            height: g.height,
            labels: g.data.iter().map(|&v| v as u32).collect(),
            class_count,
        }
    }
}

/// Output size for `target` long side: aspect kept, short side rounded half
/// up, minimum 1. Images already within the target keep their size.
pub fn downscale_dims(width: u32, height: u32, target: u32) -> (u32, u32) {
    let long = width.max(height);
    if long <= target {
        return (width, height);
    }
    let short = width.min(height) as u64;
    let scaled = ((2 * short * target as u64 + long as u64) / (2 * long as u64)).max(1) as u32;
    if width >= height {
        (target, scaled)
    } else {
        (scaled, target)
    }
}

/// Exact area averaging: each output pixel is the overlap-weighted mean of
/// the source pixels under it, rounded half up. Integer arithmetic only.
pub fn downscale(img: &Gray, target: u32) -> Gray {
    let target = target.max(1);
    let (w, h) = downscale_dims(img.width, img.height, target);
    if (w, h) == (img.width, img.height) {
        return img.clone();
    }
    let (sw, sh) = (img.width as u64, img.height as u64);
    let (dw, dh) = (w as u64, h as u64);
    // In units of 1/(dw) source pixels horizontally (and 1/dh vertically),
    // output pixel X spans [X·sw, (X+1)·sw) and source pixel i spans [i·dw, (i+1)·dw).
    let spans = |dst: u64, src: u64, n: u64| -> Vec<Vec<(u32, u64)>> {
        (0..n)
            .map(|d| {
                let (lo, hi) = (d * src, (d + 1) * src);
                let first = lo / dst;
                let last = (hi - 1) / dst;
                (first..=last)
                    .map(|i| {
                        let (a, b) = (i * dst, (i + 1) * dst);
                        (i as u32, hi.min(b) - lo.max(a))
                    })
                    .collect()
            })
            .collect()
    };
    let xs = spans(dw, sw, dw);
    let ys = spans(dh, sh, dh);
    let area = sw * sh;
    let mut out = Gray::new(w, h, 0);
    for (y, yspan) in ys.iter().enumerate() {
        for (x, xspan) in xs.iter().enumerate() {
            let mut acc = 0u64;
            for &(sy, wy) in yspan {
                for &(sx, wx) in xspan {
                    acc += wx * wy * img.get(sx, sy) as u64;
                }
            }
            out.set(x as u32, y as u32, ((2 * acc + area) / (2 * area)) as u8);
        }
    }
    out
}

/// A segmentation model: a batch of images in, one mask per image out.
pub trait InferenceAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn infer_batch(
        &self,
        batch: &[Gray],
        class_count: u32,
    ) -> Result<Vec<SegmentationMask>, String>;
}

/// Deterministic luma bands: `label = floor(luma · class_count / 256)`.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubAdapter;

pub fn stub_label(luma: u8, class_count: u32) -> u32 {
    luma as u32 * class_count / 256
}

impl InferenceAdapter for StubAdapter {
    fn name(&self) -> &str {
        "stub"
    }

    fn infer_batch(
        &self,
        batch: &[Gray],
        class_count: u32,
    ) -> Result<Vec<SegmentationMask>, String> {
        Ok(batch
            .iter()
            .map(|img| SegmentationMask {
                width: img.width,
                height: img.height,
                labels: img
                    .data
                    .iter()
                    .map(|&l| stub_label(l, class_count))
                    .collect(),
                class_count,
            })
            .collect())
    }
}

/// Runs `images` through `adapter` in consecutive batches. Each batch
/// reports its own result so one failing batch does not hide the others.
pub fn run_inference(
    images: &[Gray],
    adapter: &dyn InferenceAdapter,
    batch_size: usize,
    class_count: u32,
) -> Vec<Result<Vec<SegmentationMask>, String>> {
    images
        .chunks(batch_size.max(1))
        .map(|batch| {
            let masks = adapter.infer_batch(batch, class_count)?;
            if masks.len() != batch.len() {
                return Err(format!(
                    "adapter returned {} masks for {} images",
                    masks.len(),
                    batch.len()
                ));
            }
            for (m, img) in masks.iter().zip(batch) {
                if (m.width, m.height) != (img.width, img.height) {
                    return Err(format!(
                        "adapter mask {}x{} for image {}x{}",
                        m.width, m.height, img.width, img.height
                    ));
                }
            }
            Ok(masks)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskVerdict {
    Pass,
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    LabelOutOfRange {
        x: u32,
        y: u32,
        label: u32,
        class_count: u32,
    },
    /// The label set cannot be stored in an 8-bit mask.
    NotRepresentable {
        class_count: u32,
    },
    /// Pixel buffer length does not match width × height.
    Malformed {
        pixels: usize,
    },
}

impl MaskVerdict {
    pub fn passed(&self) -> bool {
        *self == MaskVerdict::Pass
    }
}

pub fn validate_mask(
    mask: &SegmentationMask,
    expected: (u32, u32),
    class_count: u32,
) -> MaskVerdict {
    if class_count == 0 || class_count > 256 {
        return MaskVerdict::NotRepresentable { class_count };
    }
    if (mask.width, mask.height) != expected {
        return MaskVerdict::DimensionMismatch {
            expected,
            actual: (mask.width, mask.height),
        };
    }
    if mask.labels.len() != mask.width as usize * mask.height as usize {
        return MaskVerdict::Malformed {
            pixels: mask.labels.len(),
        };
    }
    if let Some(idx) = mask.labels.iter().position(|&l| l >= class_count) {
        let w = mask.width as usize;
        return MaskVerdict::LabelOutOfRange {
            x: (idx % w) as u32,
            y: (idx / w) as u32,
            label: mask.labels[idx],
            class_count,
        };
    }
    MaskVerdict::Pass
}

/// `src = floor(dst · src_dim / dst_dim)` on each axis.
pub fn upscale_nearest(mask: &SegmentationMask, width: u32, height: u32) -> SegmentationMask {
    let mut labels = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        let sy = (y as u64 * mask.height as u64 / height as u64) as u32;
        for x in 0..width {
            let sx = (x as u64 * mask.width as u64 / width as u64) as u32;
            labels.push(mask.get(sx, sy));
        }
    }
    SegmentationMask {
        width,
        height,
        labels,
        class_count: mask.class_count,
    }
}

/// One 0/255 grid per class id, in class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMaskSet {
    pub width: u32,
    pub height: u32,
    pub grids: Vec<Gray>,
}

impl BinaryMaskSet {
    /// Exactly one grid holds 255 at every pixel.
    pub fn is_partition(&self) -> bool {
        (0..self.width as usize * self.height as usize).all(|i| {
            let mut on = 0;
            for g in &self.grids {
                match g.data[i] {
                    255 => on += 1,
                    0 => {}
                    _ => return false,
                }
            }
            on == 1
        })
    }

    /// Class at a pixel, if exactly one grid claims it.
    pub fn class_at(&self, x: u32, y: u32) -> Option<u32> {
        let mut found = None;
        for (k, g) in self.grids.iter().enumerate() {
            if g.get(x, y) == 255 {
                if found.is_some() {
                    return None;
                }
                found = Some(k as u32);
            }
        }
        found
    }
}

pub fn split_binary_masks(mask: &SegmentationMask, class_count: u32) -> BinaryMaskSet {
    let grids = (0..class_count)
        .map(|c| Gray {
            width: mask.width,
            height: mask.height,
            data: mask
                .labels
                .iter()
                .map(|&l| if l == c { 255 } else { 0 })
                .collect(),
        })
        .collect();
    BinaryMaskSet {
        width: mask.width,
        height: mask.height,
        grids,
    }
}

/// Labels each point with the class voted by most cameras that see it;
/// ties go to the lowest class id. Points no camera sees lose any label.
///
/// `masks` maps an image stem to that image's binary masks at original
/// resolution.
pub fn classify_point_cloud(
    cloud: &PointCloud,
    masks: &HashMap<String, BinaryMaskSet>,
    alignment: &SparseAlignment,
) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.points {
        let (x, y) = (p.position[0] as f64, p.position[1] as f64);
        let mut votes: BTreeMap<u32, u32> = BTreeMap::new();
        for cam in &alignment.cameras {
            if !cam.sees(x, y) {
                continue;
            }
            let Some(set) = masks.get(&cam.image) else {
                continue;
            };
            let (u, v) = cam.pixel_of(x, y, set.width, set.height);
            if let Some(c) = set.class_at(u, v) {
                *votes.entry(c).or_insert(0) += 1;
            }
        }
        // BTreeMap iterates ascending, and only a strictly larger count
        // replaces the leader, so ties keep the lowest id.
        let mut best: Option<(u32, u32)> = None;
        for (&class, &n) in &votes {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((class, n));
            }
        }
        p.class_id = best.map(|(c, _)| c);
    }
    out
}

/// Stage directories under a run workspace, each sealed with a manifest.
#[derive(Debug, Clone)]
pub struct MlWorkspace {
    pub root: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stages: BTreeMap<String, Vec<FileEntry>>,
}

impl MlWorkspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MlWorkspace { root: root.into() }
    }

    /// Creates every stage directory.
    pub fn create(root: impl Into<PathBuf>) -> io::Result<Self> {
        let ws = Self::new(root);
        for s in STAGES {
            std::fs::create_dir_all(ws.stage_dir(s))?;
        }
        Ok(ws)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn stage_dirs(&self) -> BTreeMap<&'static str, PathBuf> {
        STAGES.iter().map(|s| (*s, self.stage_dir(s))).collect()
    }

    pub fn manifest(&self) -> io::Result<StageManifest> {
        match std::fs::read_to_string(self.root.join(MANIFEST_FILE)) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(StageManifest::default()),
            Err(e) => Err(e),
        }
    }

    /// Records the files currently in `stage` with their digests.
    pub fn seal_stage(&self, stage: &str) -> io::Result<Vec<FileEntry>> {
        let files = list_files(&self.stage_dir(stage))?;
        let mut m = self.manifest()?;
        m.stages.insert(stage.to_string(), files.clone());
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(
            &tmp,
            serde_json::to_vec_pretty(&m).expect("manifest serializes"),
        )?;
        std::fs::rename(tmp, self.root.join(MANIFEST_FILE))?;
        Ok(files)
    }

    pub fn file(&self, stage: &str, name: &str) -> PathBuf {
        self.stage_dir(stage).join(name)
    }
}

pub fn is_under(path: &Path, root: &Path) -> bool {
    path.starts_with(root)
}
