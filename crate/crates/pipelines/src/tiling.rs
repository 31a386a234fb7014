//! Quadtree tiling of a point cloud over x/y.
//!
//! Level 0 is one tile over the cloud's bounding box; each further level
//! splits every tile into 2×2. Leaves (the last level) partition the points:
//! a point belongs to the leaf whose half-open cell contains it, with the
//! upper edge of the box folded into the last row/column.

use serde::{Deserialize, Serialize};

use crate::recon::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub level: u32,
    pub col: u32,
    pub row: u32,
    pub bounds: Bounds,
    /// Half-open index ranges into the cloud's point list.
    pub point_refs: Vec<[u32; 2]>,
    pub leaf: bool,
}

impl Tile {
    pub fn point_count(&self) -> u64 {
        self.point_refs.iter().map(|[a, b]| (b - a) as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiledModel {
    pub levels: u32,
    pub bounds: Bounds,
    pub point_count: u64,
    pub tiles: Vec<Tile>,
}

impl TiledModel {
    pub fn leaves(&self) -> impl Iterator<Item = &Tile> {
        self.tiles.iter().filter(|t| t.leaf)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TilingError {
    #[error("cannot tile an empty point cloud")]
    Empty,
    #[error("levels must be between 1 and 12, got {0}")]
    Levels(u32),
}

pub fn cloud_bounds(cloud: &PointCloud) -> Option<Bounds> {
    let first = cloud.points.first()?.position;
    let mut b = Bounds {
        min: first,
        max: first,
    };
    for p in &cloud.points {
        for k in 0..3 {
            b.min[k] = b.min[k].min(p.position[k]);
            b.max[k] = b.max[k].max(p.position[k]);
        }
    }
    Some(b)
}

fn cell(v: f32, lo: f32, hi: f32, n: u32) -> u32 {
    if hi <= lo {
        return 0;
    }
    let c = (((v - lo) / (hi - lo)) * n as f32).floor();
    (c.max(0.0) as u32).min(n - 1)
}

/// Merges sorted indices into half-open runs.
fn ranges(indices: &[u32]) -> Vec<[u32; 2]> {
    let mut out: Vec<[u32; 2]> = Vec::new();
    for &i in indices {
        match out.last_mut() {
            Some(r) if r[1] == i => r[1] = i + 1,
            _ => out.push([i, i + 1]),
        }
    }
    out
}

pub fn build_tiled_model(cloud: &PointCloud, levels: u32) -> Result<TiledModel, TilingError> {
    if !(1..=12).contains(&levels) {
        return Err(TilingError::Levels(levels));
    }
    let bounds = cloud_bounds(cloud).ok_or(TilingError::Empty)?;
    let mut tiles = Vec::new();
    for level in 0..levels {
        let n = 1u32 << level;
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); (n * n) as usize];
        for (idx, p) in cloud.points.iter().enumerate() {
            let c = cell(p.position[0], bounds.min[0], bounds.max[0], n);
            let r = cell(p.position[1], bounds.min[1], bounds.max[1], n);
            members[(r * n + c) as usize].push(idx as u32);
        }
        let sx = (bounds.max[0] - bounds.min[0]) / n as f32;
        let sy = (bounds.max[1] - bounds.min[1]) / n as f32;
        for row in 0..n {
            for col in 0..n {
                let m = &members[(row * n + col) as usize];
                let mut tb = Bounds {
                    min: [
                        bounds.min[0] + sx * col as f32,
                        bounds.min[1] + sy * row as f32,
                        bounds.min[2],
                    ],
                    max: [
                        if col + 1 == n {
                            bounds.max[0]
                        } else {
                            bounds.min[0] + sx * (col + 1) as f32
                        },
                        if row + 1 == n {
                            bounds.max[1]
                        } else {
                            bounds.min[1] + sy * (row + 1) as f32
                        },
                        bounds.max[2],
                    ],
                };
                if !m.is_empty() {
                    let zs = m.iter().map(|&i| cloud.points[i as usize].position[2]);
                    tb.min[2] = zs.clone().fold(f32::INFINITY, f32::min);
                    tb.max[2] = zs.fold(f32::NEG_INFINITY, f32::max);
                }
                tiles.push(Tile {
                    level,
                    col,
                    row,
                    bounds: tb,
                    point_refs: ranges(m),
                    leaf: level + 1 == levels,
                });
            }
        }
    }
    Ok(TiledModel {
        levels,
        bounds,
        point_count: cloud.points.len() as u64,
        tiles,
    })
}
