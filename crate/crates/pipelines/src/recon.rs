//! Reconstruction adapter seam and the bundled synthetic engine.
//!
//! The adapter mirrors the granularity of a commercial photogrammetry
//! package: align, depth maps, dense cloud, mesh, texture. The synthetic
//! engine implements it over a known terrain so every pipeline path can be
//! checked exactly:
//!
//! * terrain height `h(x, y) = 0.1 · sin(2πx) · cos(2πy)` over the unit square;
//! * cameras look straight down from altitude 1 on a row-major grid:
//!   `cols = ceil(√n)`, `rows = ceil(n / cols)`, camera `k` at
//!   `(col / (cols-1), row / (rows-1), 1)` (a single column or row sits at 0);
//! * a camera sees the ground rectangle of half-width `0.5 · altitude`, and
//!   half-height scaled by the image aspect ratio;
//! * depth pixel `(i, j)` of a `W × H` map samples the ground at
//!   `x = cx - hx + (i + 0.5) · 2hx / W` (and likewise in y), depth `= 1 - h`;
//! * dense cloud and meshes use the `g × g` lattice `(i/(g-1), j/(g-1), h)`
//!   in row-major order; each lattice cell is split into two triangles.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::Gray;
use crate::import::ImageAsset;

pub const ALTITUDE: f64 = 1.0;
pub const AMPLITUDE: f64 = 0.1;
pub const TIE_POINTS_PER_IMAGE: u64 = 100;
/// Longest side of a synthetic depth map.
pub const DEPTH_MAP_MAX_SIDE: u32 = 256;

/// Synthetic terrain height.
pub fn height(x: f64, y: f64) -> f64 {
    AMPLITUDE * (2.0 * PI * x).sin() * (2.0 * PI * y).cos()
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReconError {
    #[error("alignment needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Stem of the image this camera took.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub position: [f64; 3],
    /// Camera-to-world rotation.
    pub orientation: [[f64; 3]; 3],
    /// Half extents of the ground footprint in x and y.
    pub footprint_half: [f64; 2],
}

impl Camera {
    pub fn sees(&self, x: f64, y: f64) -> bool {
        (x - self.position[0]).abs() <= self.footprint_half[0] + 1e-12
            && (y - self.position[1]).abs() <= self.footprint_half[1] + 1e-12
    }

    /// Pixel of a `width × height` raster covering the footprint that
    /// contains ground point `(x, y)`, clamped to the raster.
    pub fn pixel_of(&self, x: f64, y: f64, width: u32, height: u32) -> (u32, u32) {
        let [hx, hy] = self.footprint_half;
        let u = ((x - (self.position[0] - hx)) / (2.0 * hx) * width as f64).floor();
        let v = ((y - (self.position[1] - hy)) / (2.0 * hy) * height as f64).floor();
        (
            (u.max(0.0) as u32).min(width - 1),
            (v.max(0.0) as u32).min(height - 1),
        )
    }
}

/// Nadir-looking: camera x → world x, camera y → world −y, view axis → world −z.
pub const NADIR: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseAlignment {
    pub cameras: Vec<Camera>,
    pub tie_point_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub image: String,
    pub width: u32,
    pub height: u32,
    /// Row-major, meters; 0 = no estimate.
    pub depth: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, i: u32, j: u32) -> f64 {
        self.depth[j as usize * self.width as usize + i as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub position: [f32; 3],
    pub color: [u8; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn positions(&self) -> Vec<[f32; 3]> {
        self.points.iter().map(|p| p.position).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uv: Option<Vec<[f32; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<Texture>,
}

impl Mesh {
    /// Faces index existing vertices and never repeat a vertex.
    pub fn check(&self) -> Result<(), String> {
        let n = self.vertices.len() as u32;
        for (k, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(format!("face {k} indexes past {n} vertices"));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(format!("face {k} is degenerate"));
            }
        }
        if let Some(uv) = &self.uv {
            if uv.len() != self.vertices.len() {
                return Err("uv count differs from vertex count".into());
            }
        }
        Ok(())
    }
}

pub enum CloudSource<'a> {
    DepthMaps(&'a [DepthMap]),
    /// Let the engine compute the cloud from the alignment alone.
    Engine,
}

pub enum MeshSource<'a> {
    DepthMaps(&'a [DepthMap]),
    PointCloud(&'a PointCloud),
}

pub trait ReconstructionEngine: Send + Sync {
    fn name(&self) -> &str;
    fn align(&self, kept: &[ImageAsset]) -> Result<SparseAlignment, ReconError>;
    fn build_depth_maps(&self, alignment: &SparseAlignment) -> Result<Vec<DepthMap>, ReconError>;
    fn build_point_cloud(
        &self,
        source: CloudSource<'_>,
        alignment: &SparseAlignment,
        images: &[ImageAsset],
        grid_resolution: u32,
    ) -> Result<PointCloud, ReconError>;
    fn build_mesh(&self, source: MeshSource<'_>, grid_resolution: u32) -> Result<Mesh, ReconError>;
    fn texture_mesh(&self, mesh: &Mesh, images: &[ImageAsset]) -> Result<Mesh, ReconError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticEngine;

/// `(cols, rows)` of the camera grid for `n` images.
pub fn camera_grid(n: usize) -> (usize, usize) {
    let mut cols = (n as f64).sqrt().ceil() as usize;
    // Guard against float error for perfect squares.
    while cols * cols < n {
        cols += 1;
    }
    while cols > 1 && (cols - 1) * (cols - 1) >= n {
        cols -= 1;
    }
    let cols = cols.max(1);
    (cols, n.div_ceil(cols))
}

fn grid_coord(k: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        k as f64 / (count - 1) as f64
    }
}

/// Depth-map dimensions: the long side capped, aspect kept.
pub fn depth_map_dims(width: u32, height: u32) -> (u32, u32) {
    let long = width.max(height);
    if long <= DEPTH_MAP_MAX_SIDE {
        return (width, height);
    }
    let scale = |s: u32| {
        ((s as u64 * DEPTH_MAP_MAX_SIDE as u64 * 2 + long as u64) / (2 * long as u64)).max(1) as u32
    };
    (scale(width), scale(height))
}

pub fn lattice_coord(i: u32, g: u32) -> f64 {
    if g <= 1 {
        0.0
    } else {
        i as f64 / (g - 1) as f64
    }
}

fn lattice_positions(g: u32) -> Vec<[f32; 3]> {
    let mut out = Vec::with_capacity(g as usize * g as usize);
    for j in 0..g {
        for i in 0..g {
            let (x, y) = (lattice_coord(i, g), lattice_coord(j, g));
            out.push([x as f32, y as f32, height(x, y) as f32]);
        }
    }
    out
}

fn lattice_faces(g: u32) -> Vec<[u32; 3]> {
    let mut faces = Vec::new();
    for j in 0..g.saturating_sub(1) {
        for i in 0..g - 1 {
            let v00 = j * g + i;
            let v10 = v00 + 1;
            let v01 = v00 + g;
            let v11 = v01 + 1;
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
        }
    }
    faces
}

/// Index of the camera nearest to `(x, y)`; ties go to the lowest index.
pub fn nearest_camera(cameras: &[Camera], x: f64, y: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in cameras.iter().enumerate() {
        let d = (c.position[0] - x).powi(2) + (c.position[1] - y).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

fn mean_luma(images: &[ImageAsset]) -> u8 {
    let (mut sum, mut n) = (0u64, 0u64);
    for img in images {
        sum += img.luma.data.iter().map(|&v| v as u64).sum::<u64>();
        n += img.luma.pixel_count() as u64;
    }
    if n == 0 {
        0
    } else {
        ((2 * sum + n) / (2 * n)) as u8
    }
}

impl ReconstructionEngine for SyntheticEngine {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn align(&self, kept: &[ImageAsset]) -> Result<SparseAlignment, ReconError> {
        if kept.len() < 2 {
            return Err(ReconError::TooFewImages(kept.len()));
        }
        let (cols, rows) = camera_grid(kept.len());
        let cameras = kept
            .iter()
            .enumerate()
            .map(|(k, img)| {
                let hx = 0.5 * ALTITUDE;
                Camera {
                    image: img.stem.clone(),
                    width: img.width,
                    height: img.height,
                    position: [
                        grid_coord(k % cols, cols),
                        grid_coord(k / cols, rows),
                        ALTITUDE,
                    ],
                    orientation: NADIR,
                    footprint_half: [hx, hx * img.height as f64 / img.width as f64],
                }
            })
            .collect();
        Ok(SparseAlignment {
            cameras,
            tie_point_count: TIE_POINTS_PER_IMAGE * kept.len() as u64,
        })
    }

    fn build_depth_maps(&self, alignment: &SparseAlignment) -> Result<Vec<DepthMap>, ReconError> {
        if alignment.cameras.is_empty() {
            return Err(ReconError::EmptyInput("alignment has no cameras"));
        }
        Ok(alignment
            .cameras
            .par_iter()
            .map(|cam| {
                let (w, h) = depth_map_dims(cam.width, cam.height);
                let [hx, hy] = cam.footprint_half;
                let mut depth = Vec::with_capacity(w as usize * h as usize);
                for j in 0..h {
                    let y = cam.position[1] - hy + (j as f64 + 0.5) * 2.0 * hy / h as f64;
                    for i in 0..w {
                        let x = cam.position[0] - hx + (i as f64 + 0.5) * 2.0 * hx / w as f64;
                        depth.push(cam.position[2] - height(x, y));
                    }
                }
                DepthMap {
                    image: cam.image.clone(),
                    width: w,
                    height: h,
                    depth,
                }
            })
            .collect())
    }

    fn build_point_cloud(
        &self,
        source: CloudSource<'_>,
        alignment: &SparseAlignment,
        images: &[ImageAsset],
        grid_resolution: u32,
    ) -> Result<PointCloud, ReconError> {
        if let CloudSource::DepthMaps(maps) = source {
            // The terrain is known analytically; the maps only have to exist.
            if maps.is_empty() {
                return Err(ReconError::EmptyInput("no depth maps"));
            }
        }
        if grid_resolution == 0 {
            return Err(ReconError::Invalid(
                "grid_resolution must be positive".into(),
            ));
        }
        let by_stem: std::collections::HashMap<&str, &Gray> =
            images.iter().map(|a| (a.stem.as_str(), &a.luma)).collect();
        let points = lattice_positions(grid_resolution)
            .into_iter()
            .map(|p| {
                let (x, y) = (p[0] as f64, p[1] as f64);
                let l = nearest_camera(&alignment.cameras, x, y)
                    .and_then(|k| {
                        let cam = &alignment.cameras[k];
                        by_stem.get(cam.image.as_str()).map(|img| {
                            let (u, v) = cam.pixel_of(x, y, img.width, img.height);
                            img.get(u, v)
                        })
                    })
                    .unwrap_or(0);
                Point {
                    position: p,
                    color: [l, l, l],
                    class_id: None,
                }
            })
            .collect();
        Ok(PointCloud { points })
    }

    fn build_mesh(&self, source: MeshSource<'_>, grid_resolution: u32) -> Result<Mesh, ReconError> {
        let (vertices, g) = match source {
            MeshSource::DepthMaps(maps) => {
                if maps.is_empty() {
                    return Err(ReconError::EmptyInput("no depth maps"));
                }
                (lattice_positions(grid_resolution), grid_resolution)
            }
            MeshSource::PointCloud(cloud) => {
                if cloud.points.is_empty() {
                    return Err(ReconError::EmptyInput("empty point cloud"));
                }
                let g = (cloud.points.len() as f64).sqrt().round() as u32;
                if (g as usize) * (g as usize) != cloud.points.len() {
                    return Err(ReconError::Invalid(format!(
                        "{} points do not form a square lattice",
                        cloud.points.len()
                    )));
                }
                (cloud.positions(), g)
            }
        };
        if vertices.is_empty() {
            return Err(ReconError::EmptyInput("no vertices"));
        }
        Ok(Mesh {
            vertices,
            faces: lattice_faces(g),
            uv: None,
            texture: None,
        })
    }

    fn texture_mesh(&self, mesh: &Mesh, images: &[ImageAsset]) -> Result<Mesh, ReconError> {
        if mesh.vertices.is_empty() {
            return Err(ReconError::EmptyInput("empty mesh"));
        }
        let m = mean_luma(images);
        let mut out = mesh.clone();
        out.uv = Some(mesh.vertices.iter().map(|v| [v[0], v[1]]).collect());
        out.texture = Some(Texture {
            width: 1,
            height: 1,
            rgb: vec![m, m, m],
        });
        Ok(out)
    }
}
