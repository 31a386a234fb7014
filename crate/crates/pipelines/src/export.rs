//! Writers for ASCII PLY, OBJ/MTL and the tiled-model manifest.
//!
//! Output is byte-stable: identical inputs give identical files. Floats are
//! written in the shortest form that parses back to the same `f32`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::imaging::save_rgb_png;
use crate::recon::{Mesh, PointCloud};
use crate::tiling::TiledModel;

pub const CLOUD_FILE: &str = "cloud.ply";
pub const MESH_FILE: &str = "model.obj";
pub const MATERIAL_FILE: &str = "model.mtl";
pub const TEXTURE_FILE: &str = "model_texture.png";
pub const TILES_FILE: &str = "tiles.manifest";
pub const MASKS_DIR: &str = "masks";

/// Constant offset and scale from model to world coordinates
/// (`world = offset + scale · model`), recorded as file metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Georef {
    pub offset: [f64; 3],
    pub scale: f64,
}

impl Default for Georef {
    fn default() -> Self {
        Georef {
            offset: [0.0; 3],
            scale: 1.0,
        }
    }
}

pub fn ply_text(cloud: &PointCloud, georef: &Georef) -> String {
    let classified = cloud.points.iter().any(|p| p.class_id.is_some());
    let mut s = String::with_capacity(64 + cloud.points.len() * 40);
    s.push_str("ply\nformat ascii 1.0\n");
    let [ox, oy, oz] = georef.offset;
    let _ = writeln!(
        s,
        "comment georef offset {ox:?} {oy:?} {oz:?} scale {:?}",
        georef.scale
    );
    let _ = writeln!(s, "element vertex {}", cloud.points.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    for p in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {p}");
    }
    if classified {
        // -1 marks a point no camera classified.
        s.push_str("comment class_id -1 = unclassified\n");
        s.push_str("property int class_id\n");
    }
    s.push_str("end_header\n");
    for p in &cloud.points {
        let [x, y, z] = p.position;
        let [r, g, b] = p.color;
        let _ = write!(s, "{x} {y} {z} {r} {g} {b}");
        if classified {
            let _ = write!(s, " {}", p.class_id.map_or(-1, |c| c as i64));
        }
        s.push('\n');
    }
    s
}

pub fn obj_text(mesh: &Mesh, material: Option<&str>) -> String {
    let mut s = String::new();
    s.push_str("# flowgate mesh\n");
    if let Some(mtl) = material {
        let _ = writeln!(s, "mtllib {mtl}");
        s.push_str("usemtl textured\n");
    }
    for [x, y, z] in &mesh.vertices {
        let _ = writeln!(s, "v {x} {y} {z}");
    }
    if let Some(uv) = &mesh.uv {
        for [u, v] in uv {
            let _ = writeln!(s, "vt {u} {v}");
        }
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        if mesh.uv.is_some() {
            let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    s
}

pub fn mtl_text(texture_file: &str) -> String {
    format!("newmtl textured\nKa 1 1 1\nKd 1 1 1\nmap_Kd {texture_file}\n")
}

pub fn tiles_manifest_text(model: &TiledModel) -> String {
    let mut s = serde_json::to_string_pretty(model).expect("tiled model serializes");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> io::Result<PathBuf> {
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

/// Writes whichever artifacts are present into `out_dir`.
pub fn export_artifacts(
    out_dir: &Path,
    cloud: Option<&PointCloud>,
    tiled: Option<&TiledModel>,
    mesh: Option<&Mesh>,
    georef: &Georef,
) -> io::Result<Vec<PathBuf>> {
    if cloud.is_none() && tiled.is_none() && mesh.is_none() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "nothing to export",
        ));
    }
    fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    if let Some(cloud) = cloud {
        out.push(write(&out_dir.join(CLOUD_FILE), &ply_text(cloud, georef))?);
    }
    if let Some(tiled) = tiled {
        out.push(write(
            &out_dir.join(TILES_FILE),
            &tiles_manifest_text(tiled),
        )?);
    }
    if let Some(mesh) = mesh {
        match &mesh.texture {
            Some(tex) => {
                out.push(write(
                    &out_dir.join(MESH_FILE),
                    &obj_text(mesh, Some(MATERIAL_FILE)),
                )?);
                out.push(write(
                    &out_dir.join(MATERIAL_FILE),
                    &mtl_text(TEXTURE_FILE),
                )?);
                let tex_path = out_dir.join(TEXTURE_FILE);
                save_rgb_png(&tex_path, tex.width, tex.height, &tex.rgb)
                    .map_err(|e| io::Error::other(e.to_string()))?;
                out.push(tex_path);
            }
            None => out.push(write(&out_dir.join(MESH_FILE), &obj_text(mesh, None))?),
        }
    }
    Ok(out)
}

/// `<image_stem>__<class_name>.png`
pub fn binary_mask_name(stem: &str, class_name: &str) -> String {
    format!("{stem}__{class_name}.png")
}
