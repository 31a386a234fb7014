//! Independent readers and brute-force oracles shared by the integration
//! and acceptance tests. Nothing here calls the code it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use flowgate_core::config::{RunConfig, Variant};
use flowgate_core::pipeline::config_to_dag;
use flowgate_core::run::ExecutorKind;
use flowgate_core::state::{RunState, TaskState};
use flowgate_core::store::MetadataStore;
use flowgate_core::{Engine, EngineOptions};
use flowgate_pipelines::export::{
    ply_text, Georef, CLOUD_FILE, MASKS_DIR, MATERIAL_FILE, MESH_FILE, TEXTURE_FILE, TILES_FILE,
};
use flowgate_pipelines::imaging::{load_gray_png, Gray};
use flowgate_pipelines::ml::{downscale, split_binary_masks, upscale_nearest, SegmentationMask};
use flowgate_pipelines::recon::{Point, PointCloud};
use flowgate_pipelines::synthetic::{generate_survey, SurveySpec};
use flowgate_pipelines::PipelineRunner;

// ---------------------------------------------------------------- PLY / OBJ

#[derive(Debug, Clone, PartialEq)]
pub struct PlyVertex {
    pub xyz: [f32; 3],
    pub rgb: [u8; 3],
    pub class_id: Option<i64>,
}

/// Minimal ASCII PLY reader: header properties drive the column layout.
pub fn read_ply(text: &str) -> Result<(Vec<String>, Vec<PlyVertex>), String> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err("missing magic".into());
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut comments = Vec::new();
    for line in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["comment", rest @ ..] => comments.push(rest.join(" ")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| e.to_string())?)
            }
            ["property", _ty, name] => props.push(name.to_string()),
            ["end_header"] => break,
            other => return Err(format!("unexpected header line {other:?}")),
        }
    }
    let count = count.ok_or("no vertex element")?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = (
        col("x").ok_or("x")?,
        col("y").ok_or("y")?,
        col("z").ok_or("z")?,
    );
    let (ir, ig, ib) = (
        col("red").ok_or("red")?,
        col("green").ok_or("green")?,
        col("blue").ok_or("blue")?,
    );
    let ic = col("class_id");
    let mut out = Vec::with_capacity(count);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != props.len() {
            return Err(format!(
                "row has {} fields, header {}",
                f.len(),
                props.len()
            ));
        }
        let fl = |i: usize| f[i].parse::<f32>().map_err(|e| format!("{}: {e}", f[i]));
        let by = |i: usize| f[i].parse::<u8>().map_err(|e| format!("{}: {e}", f[i]));
        out.push(PlyVertex {
            xyz: [fl(ix)?, fl(iy)?, fl(iz)?],
            rgb: [by(ir)?, by(ig)?, by(ib)?],
            class_id: match ic {
                Some(i) => Some(f[i].parse::<i64>().map_err(|e| e.to_string())?),
                None => None,
            },
        });
    }
    if out.len() != count {
        return Err(format!("header says {count} vertices, found {}", out.len()));
    }
    Ok((comments, out))
}

pub fn ply_to_cloud(vertices: &[PlyVertex]) -> PointCloud {
    PointCloud {
        points: vertices
            .iter()
            .map(|v| Point {
                position: v.xyz,
                color: v.rgb,
                class_id: v.class_id.and_then(|c| u32::try_from(c).ok()),
            })
            .collect(),
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Obj {
    pub vertices: Vec<[f32; 3]>,
    pub uvs: Vec<[f32; 2]>,
    /// Zero-based vertex indices.
    pub faces: Vec<[usize; 3]>,
    pub mtllib: Option<String>,
}

pub fn read_obj(text: &str) -> Result<Obj, String> {
    let mut obj = Obj::default();
    for line in text.lines() {
        let w: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<f32>().map_err(|e| format!("{s}: {e}"));
        match w.first().copied() {
            None | Some("#") | Some("usemtl") => {}
            Some("mtllib") => obj.mtllib = w.get(1).map(|s| s.to_string()),
            Some("v") if w.len() == 4 => obj.vertices.push([num(w[1])?, num(w[2])?, num(w[3])?]),
            Some("vt") if w.len() == 3 => obj.uvs.push([num(w[1])?, num(w[2])?]),
            Some("f") if w.len() == 4 => {
                let mut idx = [0usize; 3];
                for k in 0..3 {
                    let v = w[k + 1].split('/').next().unwrap();
                    let one_based: usize = v.parse().map_err(|e| format!("{v}: {e}"))?;
                    if one_based == 0 {
                        return Err("OBJ indices are 1-based".into());
                    }
                    idx[k] = one_based - 1;
                }
                obj.faces.push(idx);
            }
            _ => return Err(format!("unexpected OBJ line {line:?}")),
        }
    }
    Ok(obj)
}

/// The documented synthetic heightfield, written out independently.
pub fn terrain(x: f64, y: f64) -> f64 {
    0.1 * (2.0 * PI * x).sin() * (2.0 * PI * y).cos()
}

/// Row-major g × g lattice over the unit square.
pub fn expected_lattice(g: u32) -> Vec<[f32; 3]> {
    let c = |i: u32| {
        if g <= 1 {
            0.0
        } else {
            i as f64 / (g - 1) as f64
        }
    };
    let mut out = Vec::new();
    for j in 0..g {
        for i in 0..g {
            let (x, y) = (c(i), c(j));
            out.push([x as f32, y as f32, terrain(x, y) as f32]);
        }
    }
    out
}

// ---------------------------------------------------------------- mask oracles

/// Area-average downscale via an explicit supergrid: every source pixel is
/// replicated into a `dw × dh` block, then each output pixel averages a
/// `sw × sh` block of the supergrid.
pub fn oracle_downscale(src: &Gray, dw: u32, dh: u32) -> Gray {
    let (sw, sh) = (src.width, src.height);
    let (gw, gh) = (sw * dw, sh * dh);
    let mut sup = vec![0u32; (gw * gh) as usize];
    for y in 0..gh {
        for x in 0..gw {
            sup[(y * gw + x) as usize] = src.data[((y / dh) * sw + x / dw) as usize] as u32;
        }
    }
    let mut out = vec![0u8; (dw * dh) as usize];
    for oy in 0..dh {
        for ox in 0..dw {
            let mut sum = 0u64;
            for y in oy * sh..(oy + 1) * sh {
                for x in ox * sw..(ox + 1) * sw {
                    sum += sup[(y * gw + x) as usize] as u64;
                }
            }
            let n = (sw * sh) as f64;
            // Round half up on the exact rational mean.
            out[(oy * dw + ox) as usize] = (sum as f64 / n + 0.5).floor() as u8;
        }
    }
    Gray {
        width: dw,
        height: dh,
        data: out,
    }
}

/// Expected downscaled dimensions, computed with floating point.
pub fn oracle_dims(w: u32, h: u32, target: u32) -> (u32, u32) {
    let long = w.max(h);
    if long <= target {
        return (w, h);
    }
    let short = ((w.min(h) as f64 * target as f64 / long as f64) + 0.5)
        .floor()
        .max(1.0) as u32;
    if w >= h {
        (target, short)
    } else {
        (short, target)
    }
}

/// Nearest-neighbor by search: the source index is the largest `s` with
/// `s · dst ≤ d · src`.
pub fn oracle_upscale(src: &[u32], sw: u32, sh: u32, dw: u32, dh: u32) -> Vec<u32> {
    let find = |d: u32, s_dim: u32, d_dim: u32| {
        (0..s_dim)
            .rev()
            .find(|&s| s as u64 * d_dim as u64 <= d as u64 * s_dim as u64)
            .unwrap()
    };
    let mut out = Vec::new();
    for y in 0..dh {
        for x in 0..dw {
            out.push(src[(find(y, sh, dh) * sw + find(x, sw, dw)) as usize]);
        }
    }
    out
}

pub fn oracle_split(labels: &[u32], classes: u32) -> Vec<Vec<u8>> {
    (0..classes)
        .map(|c| {
            labels
                .iter()
                .map(|&l| if l == c { 255 } else { 0 })
                .collect()
        })
        .collect()
}

/// Per-pixel argmax over the grids.
pub fn oracle_recombine(grids: &[Vec<u8>]) -> Vec<u32> {
    (0..grids[0].len())
        .map(|i| {
            let mut best = 0;
            for (k, g) in grids.iter().enumerate() {
                if g[i] > grids[best][i] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Checks downscale, upscale, split and recombine against the oracles on
/// `n` random masks. Returns the number of masks checked.
pub fn mask_oracle_suite(n: usize, seed: u64) -> Result<usize, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    for case in 0..n {
        let (w, h) = (rng.gen_range(1..=24u32), rng.gen_range(1..=24u32));
        let classes = rng.gen_range(2..=12u32);
        let labels: Vec<u32> = (0..w * h).map(|_| rng.gen_range(0..classes)).collect();
        let mask = SegmentationMask {
            width: w,
            height: h,
            labels: labels.clone(),
            class_count: classes,
        };

        // Downscale treats the label raster as an 8-bit image.
        let target = rng.gen_range(1..=30u32);
        let img = Gray {
            width: w,
            height: h,
            data: (0..w * h).map(|_| rng.gen()).collect(),
        };
        let (dw, dh) = oracle_dims(w, h, target);
        let got = downscale(&img, target);
        if (got.width, got.height) != (dw, dh) {
            return Err(format!(
                "case {case}: downscale {w}x{h}->{target} gave {}x{}",
                got.width, got.height
            ));
        }
        if got.data != oracle_downscale(&img, dw, dh).data {
            return Err(format!(
                "case {case}: downscale pixels differ for {w}x{h} target {target}"
            ));
        }

        let (uw, uh) = (rng.gen_range(1..=48u32), rng.gen_range(1..=48u32));
        let up = upscale_nearest(&mask, uw, uh);
        if (up.width, up.height) != (uw, uh) || up.labels != oracle_upscale(&labels, w, h, uw, uh) {
            return Err(format!("case {case}: upscale {w}x{h} -> {uw}x{uh} differs"));
        }
        let support: BTreeSet<u32> = labels.iter().copied().collect();
        if !up.labels.iter().all(|l| support.contains(l)) {
            return Err(format!("case {case}: upscale introduced a label"));
        }

        let set = split_binary_masks(&mask, classes);
        let expected = oracle_split(&labels, classes);
        let grids: Vec<Vec<u8>> = set.grids.iter().map(|g| g.data.clone()).collect();
        if grids != expected {
            return Err(format!("case {case}: split differs"));
        }
        for i in 0..labels.len() {
            let on: u32 = grids.iter().map(|g| g[i] as u32 / 255).sum();
            if on != 1 {
                return Err(format!("case {case}: pixel {i} claimed by {on} grids"));
            }
        }
        if oracle_recombine(&grids) != labels {
            return Err(format!("case {case}: recombine(split(m)) != m"));
        }
    }
    Ok(n)
}

// ---------------------------------------------------------------- end to end

pub const PLANTED_BLURRY: usize = 2;
pub const PLANTED_OVER: usize = 2;
pub const PLANTED_UNDER: usize = 2;
pub const SURVEY_SIZE: usize = 20;

pub fn survey_spec(seed: u64) -> SurveySpec {
    SurveySpec {
        sharp: SURVEY_SIZE - PLANTED_BLURRY - PLANTED_OVER - PLANTED_UNDER,
        blurry: PLANTED_BLURRY,
        overexposed: PLANTED_OVER,
        underexposed: PLANTED_UNDER,
        width: 64,
        height: 64,
        seed,
    }
}

#[derive(Debug)]
pub struct SurveyOutcome {
    pub positions: Vec<[f32; 3]>,
    pub textured: bool,
    pub mask_files: usize,
    pub elapsed: Duration,
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap().to_string_lossy().into_owned()
}

/// Runs the generated survey through the whole pipeline DAG and checks
/// every artifact with the independent readers above.
pub fn run_survey(variant: Variant, ml: bool, seed: u64) -> Result<SurveyOutcome, String> {
    let started = Instant::now();
    let input = tempfile::tempdir().map_err(|e| e.to_string())?;
    let output = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images = generate_survey(input.path(), &survey_spec(seed)).map_err(|e| e.to_string())?;
    let planted: BTreeSet<String> = images
        .iter()
        .map(|p| stem(p))
        .filter(|s| s.starts_with("reject_"))
        .collect();

    let mut config = RunConfig::with_input_dir(input.path());
    config.project.output_dir = output.path().to_path_buf();
    config.photogrammetry.variant = variant;
    config.ml.enabled = ml;
    let g = config.photogrammetry.grid_resolution;
    let dag = config_to_dag(&config);

    let engine = Engine::new(
        MetadataStore::in_memory(),
        Arc::new(PipelineRunner::default()),
        EngineOptions {
            workspace_root: scratch.path().to_path_buf(),
            keep_workspaces: false,
        },
    );
    let run = engine
        .execute_run(
            &dag,
            &config,
            ExecutorKind::LocalParallel { worker_count: 4 },
        )
        .map_err(|e| e.to_string())?;
    let log = |task: &str| {
        engine
            .store()
            .read_log(&run.run_id, task, 0)
            .map(|c| c.text)
            .unwrap_or_default()
    };
    if run.state != RunState::Success {
        let failed: Vec<String> = run
            .task_instances
            .values()
            .filter(|t| t.state == TaskState::Failed)
            .map(|t| format!("{}: {}", t.task_id, log(&t.task_id)))
            .collect();
        return Err(format!("run ended {:?}: {failed:?}", run.state));
    }
    if run.workspace.exists() {
        return Err(format!(
            "workspace {} left behind after success",
            run.workspace.display()
        ));
    }

    let rejected: BTreeSet<String> = log("quality_filter")
        .lines()
        .filter_map(|l| l.strip_prefix("rejected "))
        .map(|l| l.split(':').next().unwrap().to_string())
        .collect();
    if rejected != planted {
        return Err(format!("rejected {rejected:?}, planted {planted:?}"));
    }

    let out = output.path().join(&run.run_id);
    let read =
        |name: &str| std::fs::read_to_string(out.join(name)).map_err(|e| format!("{name}: {e}"));

    let ply = read(CLOUD_FILE)?;
    let (comments, vertices) = read_ply(&ply)?;
    if vertices.len() != (g * g) as usize {
        return Err(format!("{} points, expected {}", vertices.len(), g * g));
    }
    if !comments.iter().any(|c| c.starts_with("georef")) {
        return Err("PLY lacks georef metadata".into());
    }
    let positions: Vec<[f32; 3]> = vertices.iter().map(|v| v.xyz).collect();
    if positions != expected_lattice(g) {
        return Err("point positions differ from the lattice".into());
    }
    if ply_text(&ply_to_cloud(&vertices), &Georef::default()) != ply {
        return Err("PLY does not round-trip".into());
    }
    let classified = vertices
        .iter()
        .filter(|v| v.class_id.is_some_and(|c| c >= 0))
        .count();
    if ml != vertices.iter().any(|v| v.class_id.is_some()) || (ml && classified == 0) {
        return Err(format!(
            "class column presence wrong (ml {ml}, classified {classified})"
        ));
    }
    if vertices.iter().any(|v| {
        v.class_id
            .is_some_and(|c| c >= config.ml.class_count as i64)
    }) {
        return Err("class_id out of range".into());
    }

    let obj = read_obj(&read(MESH_FILE)?)?;
    if obj.vertices.len() != (g * g) as usize || obj.faces.len() != 2 * ((g - 1) * (g - 1)) as usize
    {
        return Err(format!(
            "mesh {} vertices {} faces",
            obj.vertices.len(),
            obj.faces.len()
        ));
    }
    for f in &obj.faces {
        if f.iter().any(|&i| i >= obj.vertices.len())
            || f[0] == f[1]
            || f[1] == f[2]
            || f[0] == f[2]
        {
            return Err(format!("bad face {f:?}"));
        }
    }
    let textured = obj.mtllib.is_some();
    let want_texture = variant == Variant::PointCloudFirst;
    if textured != want_texture
        || out.join(MATERIAL_FILE).exists() != want_texture
        || out.join(TEXTURE_FILE).exists() != want_texture
        || (want_texture && obj.uvs.len() != obj.vertices.len())
    {
        return Err(format!("texture artifacts wrong for {variant:?}"));
    }

    let tiles: serde_json::Value =
        serde_json::from_str(&read(TILES_FILE)?).map_err(|e| e.to_string())?;
    let mut covered = vec![0u32; (g * g) as usize];
    for tile in tiles["tiles"].as_array().ok_or("no tiles")? {
        if tile["leaf"].as_bool() != Some(true) {
            continue;
        }
        for r in tile["point_refs"].as_array().unwrap() {
            let (a, b) = (r[0].as_u64().unwrap(), r[1].as_u64().unwrap());
            for i in a..b {
                covered[i as usize] += 1;
            }
        }
    }
    if covered.iter().any(|&c| c != 1) {
        return Err("leaf tiles do not partition the points".into());
    }

    let mut mask_files = 0;
    if ml {
        let dir = out.join(MASKS_DIR);
        let mut per_image: BTreeMap<String, Vec<Gray>> = BTreeMap::new();
        for p in &images {
            for name in &config.ml.class_names {
                let path = dir.join(format!("{}__{name}.png", stem(p)));
                let m = load_gray_png(&path).map_err(|e| e.to_string())?;
                per_image.entry(stem(p)).or_default().push(m);
                mask_files += 1;
            }
        }
        let on_disk = std::fs::read_dir(&dir).map_err(|e| e.to_string())?.count();
        if on_disk != mask_files {
            return Err(format!("{on_disk} mask files, expected {mask_files}"));
        }
        for (s, grids) in per_image {
            for gm in &grids {
                if (gm.width, gm.height) != (64, 64) || gm.data.iter().any(|&v| v != 0 && v != 255)
                {
                    return Err(format!("{s}: mask not a 64x64 binary grid"));
                }
            }
            for i in 0..64 * 64 {
                if grids.iter().filter(|gm| gm.data[i] == 255).count() != 1 {
                    return Err(format!("{s}: partition broken at pixel {i}"));
                }
            }
        }
    }

    Ok(SurveyOutcome {
        positions,
        textured,
        mask_files,
        elapsed: started.elapsed(),
    })
}
