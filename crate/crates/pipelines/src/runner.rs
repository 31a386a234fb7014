//! Task bodies for every pipeline task kind. Tasks hand data to each other
//! through JSON and PNG intermediates in the run workspace; only the export
//! tasks write to the run's output directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use flowgate_core::config::Variant;
use flowgate_core::dag::{TaskKind, TaskSpec};
use flowgate_core::pipeline::{
    DEFAULT_TILE_LEVELS, PARAM_LEVELS, PARAM_SOURCE, SOURCE_POINT_CLOUD,
};
use flowgate_core::shell::ShellRunner;
use flowgate_core::{TaskContext, TaskResult, TaskRunner};

use crate::export::{binary_mask_name, export_artifacts, Georef, MASKS_DIR};
use crate::imaging::{load_gray_png, load_luma, save_png, Gray};
use crate::import::{import_images, AssetInfo, ImageAsset};
use crate::ml::{
    classify_point_cloud, downscale, run_inference, split_binary_masks, upscale_nearest,
    validate_mask, BinaryMaskSet, InferenceAdapter, MaskVerdict, MlWorkspace, SegmentationMask,
    StubAdapter, STAGE_DOWNSCALED, STAGE_MASKS_BINARY, STAGE_MASKS_FULL, STAGE_MASKS_RAW,
};
use crate::quality::{quality_filter, QualityReport};
use crate::recon::{
    CloudSource, DepthMap, Mesh, MeshSource, PointCloud, ReconstructionEngine, SparseAlignment,
    SyntheticEngine,
};
use crate::tiling::{build_tiled_model, TiledModel};

/// Intermediate file names, relative to `<workspace>/state`.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const IMAGES: &str = "images.json";
    pub const QUALITY: &str = "quality.json";
    pub const ALIGNMENT: &str = "alignment.json";
    pub const DEPTH_MAPS: &str = "depth_maps.json";
    pub const CLOUD: &str = "cloud.json";
    pub const TILES: &str = "tiles.json";
    pub const MESH: &str = "mesh.json";
    pub const MESH_TEXTURED: &str = "mesh_textured.json";
    pub const CLASSIFIED_CLOUD: &str = "cloud_classified.json";
    pub const ML_IMAGES: &str = "ml_images.json";
    pub const MASK_VALIDATION: &str = "mask_validation.json";
}

pub const STATE_DIR: &str = "state";
pub const ML_DIR: &str = "ml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityFile {
    pub kept: Vec<AssetInfo>,
    pub rejected: Vec<(AssetInfo, QualityReport)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskValidationEntry {
    pub stem: String,
    pub verdict: MaskVerdict,
}

/// Runs pipeline tasks with a pluggable reconstruction engine and
/// segmentation adapter. `Shell` tasks go to [`ShellRunner`].
#[derive(Clone)]
pub struct PipelineRunner {
    pub engine: Arc<dyn ReconstructionEngine>,
    pub adapter: Arc<dyn InferenceAdapter>,
}

impl Default for PipelineRunner {
    fn default() -> Self {
        PipelineRunner {
            engine: Arc::new(SyntheticEngine),
            adapter: Arc::new(StubAdapter),
        }
    }
}

impl PipelineRunner {
    pub fn new(engine: Arc<dyn ReconstructionEngine>, adapter: Arc<dyn InferenceAdapter>) -> Self {
        PipelineRunner { engine, adapter }
    }
}

type Res<T> = Result<T, String>;

fn state_path(ctx: &TaskContext, name: &str) -> PathBuf {
    ctx.workspace.join(STATE_DIR).join(name)
}

fn save<T: Serialize>(ctx: &TaskContext, name: &str, value: &T) -> Res<()> {
    let path = state_path(ctx, name);
    fs::create_dir_all(path.parent().expect("state file has a parent"))
        .map_err(|e| e.to_string())?;
    let bytes = serde_json::to_vec(value).map_err(|e| e.to_string())?;
    // Write-then-rename so a retried task never sees a half-written file.
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| format!("{}: {e}", tmp.display()))?;
    fs::rename(&tmp, &path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load<T: DeserializeOwned>(ctx: &TaskContext, name: &str) -> Res<T> {
    let path = state_path(ctx, name);
    let bytes =
        fs::read(&path).map_err(|e| format!("missing intermediate {}: {e}", path.display()))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| format!("corrupt intermediate {}: {e}", path.display()))
}

fn exists(ctx: &TaskContext, name: &str) -> bool {
    state_path(ctx, name).is_file()
}

fn reload(infos: &[AssetInfo]) -> Res<Vec<ImageAsset>> {
    infos
        .iter()
        .map(|i| {
            let luma = load_luma(&i.path).map_err(|e| e.to_string())?;
            Ok(ImageAsset {
                path: i.path.clone(),
                stem: i.stem.clone(),
                width: i.width,
                height: i.height,
                luma,
                quality: None,
            })
        })
        .collect()
}

fn kept_assets(ctx: &TaskContext) -> Res<Vec<ImageAsset>> {
    let q: QualityFile = load(ctx, files::QUALITY)?;
    reload(&q.kept)
}

fn ml_workspace(ctx: &TaskContext) -> MlWorkspace {
    MlWorkspace::new(ctx.workspace.join(ML_DIR))
}

fn png_name(stem: &str) -> String {
    format!("{stem}.png")
}

fn levels(task: &TaskSpec) -> Res<u32> {
    match task.params.get(PARAM_LEVELS) {
        None => Ok(DEFAULT_TILE_LEVELS),
        Some(v) => v
            .parse()
            .map_err(|_| format!("invalid {PARAM_LEVELS} {v:?}")),
    }
}

fn from_point_cloud(task: &TaskSpec) -> bool {
    task.params.get(PARAM_SOURCE).map(String::as_str) == Some(SOURCE_POINT_CLOUD)
}

impl PipelineRunner {
    fn configure(&self, ctx: &TaskContext) -> Res<String> {
        ctx.config.validate().map_err(|e| e.to_string())?;
        let input = &ctx.config.project.input_dir;
        if !input.is_dir() {
            return Err(format!("input_dir {} is not a directory", input.display()));
        }
        fs::create_dir_all(&ctx.output_dir)
            .map_err(|e| format!("{}: {e}", ctx.output_dir.display()))?;
        save(ctx, files::CONFIG, &*ctx.config)?;
        Ok(format!(
            "variant {}",
            ctx.config.photogrammetry.variant.as_str()
        ))
    }

    fn import(&self, ctx: &TaskContext) -> Res<String> {
        let result = import_images(&ctx.config.project.input_dir).map_err(|e| e.to_string())?;
        for w in &result.warnings {
            ctx.log(format!("warning: {w}"));
        }
        let infos: Vec<AssetInfo> = result.assets.iter().map(ImageAsset::info).collect();
        save(ctx, files::IMAGES, &infos)?;
        Ok(format!("{} images", infos.len()))
    }

    fn quality(&self, ctx: &TaskContext) -> Res<String> {
        let infos: Vec<AssetInfo> = load(ctx, files::IMAGES)?;
        let filtered = quality_filter(reload(&infos)?, &ctx.config.photogrammetry);
        for (a, r) in &filtered.rejected {
            ctx.log(format!(
                "rejected {}: {:?} (blur variance {:.1})",
                a.stem, r.verdict, r.blur_variance
            ));
        }
        let file = QualityFile {
            kept: filtered.kept.iter().map(ImageAsset::info).collect(),
            rejected: filtered
                .rejected
                .iter()
                .map(|(a, r)| (a.info(), r.clone()))
                .collect(),
        };
        save(ctx, files::QUALITY, &file)?;
        if file.kept.is_empty() {
            return Err("every image was rejected by the quality filter".into());
        }
        Ok(format!(
            "kept {} rejected {}",
            file.kept.len(),
            file.rejected.len()
        ))
    }

    fn align(&self, ctx: &TaskContext) -> Res<String> {
        let alignment = self
            .engine
            .align(&kept_assets(ctx)?)
            .map_err(|e| e.to_string())?;
        save(ctx, files::ALIGNMENT, &alignment)?;
        Ok(format!("{} cameras", alignment.cameras.len()))
    }

    fn depth_maps(&self, ctx: &TaskContext) -> Res<String> {
        let alignment: SparseAlignment = load(ctx, files::ALIGNMENT)?;
        let maps = self
            .engine
            .build_depth_maps(&alignment)
            .map_err(|e| e.to_string())?;
        save(ctx, files::DEPTH_MAPS, &maps)?;
        Ok(format!("{} depth maps", maps.len()))
    }

    fn point_cloud(&self, task: &TaskSpec, ctx: &TaskContext) -> Res<String> {
        let alignment: SparseAlignment = load(ctx, files::ALIGNMENT)?;
        let images = kept_assets(ctx)?;
        let g = ctx.config.photogrammetry.grid_resolution;
        let cloud = if from_point_cloud(task) {
            self.engine
                .build_point_cloud(CloudSource::Engine, &alignment, &images, g)
        } else {
            let maps: Vec<DepthMap> = load(ctx, files::DEPTH_MAPS)?;
            self.engine
                .build_point_cloud(CloudSource::DepthMaps(&maps), &alignment, &images, g)
        }
        .map_err(|e| e.to_string())?;
        save(ctx, files::CLOUD, &cloud)?;
        Ok(format!("{} points", cloud.points.len()))
    }

    fn tiled_model(&self, task: &TaskSpec, ctx: &TaskContext) -> Res<String> {
        let cloud: PointCloud = load(ctx, files::CLOUD)?;
        let model = build_tiled_model(&cloud, levels(task)?).map_err(|e| e.to_string())?;
        save(ctx, files::TILES, &model)?;
        Ok(format!(
            "{} tiles over {} levels",
            model.tiles.len(),
            model.levels
        ))
    }

    fn mesh(&self, task: &TaskSpec, ctx: &TaskContext) -> Res<String> {
        let g = ctx.config.photogrammetry.grid_resolution;
        let mesh = if from_point_cloud(task) {
            let cloud: PointCloud = load(ctx, files::CLOUD)?;
            self.engine.build_mesh(MeshSource::PointCloud(&cloud), g)
        } else {
            let maps: Vec<DepthMap> = load(ctx, files::DEPTH_MAPS)?;
            self.engine.build_mesh(MeshSource::DepthMaps(&maps), g)
        }
        .map_err(|e| e.to_string())?;
        mesh.check()?;
        save(ctx, files::MESH, &mesh)?;
        Ok(format!(
            "{} vertices {} faces",
            mesh.vertices.len(),
            mesh.faces.len()
        ))
    }

    fn texture(&self, ctx: &TaskContext) -> Res<String> {
        let mesh: Mesh = load(ctx, files::MESH)?;
        let textured = self
            .engine
            .texture_mesh(&mesh, &kept_assets(ctx)?)
            .map_err(|e| e.to_string())?;
        save(ctx, files::MESH_TEXTURED, &textured)?;
        Ok("textured".into())
    }

    fn export(&self, ctx: &TaskContext) -> Res<String> {
        let cloud: PointCloud = if exists(ctx, files::CLASSIFIED_CLOUD) {
            load(ctx, files::CLASSIFIED_CLOUD)?
        } else {
            load(ctx, files::CLOUD)?
        };
        let tiles: TiledModel = load(ctx, files::TILES)?;
        let mesh: Mesh = match ctx.config.photogrammetry.variant {
            Variant::PointCloudFirst => load(ctx, files::MESH_TEXTURED)?,
            Variant::DepthMapsDirect => load(ctx, files::MESH)?,
        };
        let written = export_artifacts(
            &ctx.output_dir,
            Some(&cloud),
            Some(&tiles),
            Some(&mesh),
            &Georef::default(),
        )
        .map_err(|e| format!("export to {}: {e}", ctx.output_dir.display()))?;
        for p in &written {
            ctx.log(format!("wrote {}", p.display()));
        }
        Ok(format!("{} artifacts", written.len()))
    }

    fn ml_setup(&self, ctx: &TaskContext) -> Res<String> {
        let ws = MlWorkspace::create(ctx.workspace.join(ML_DIR)).map_err(|e| e.to_string())?;
        Ok(ws.root.display().to_string())
    }

    fn downscale(&self, ctx: &TaskContext) -> Res<String> {
        let ws = ml_workspace(ctx);
        let result = import_images(&ctx.config.project.input_dir).map_err(|e| e.to_string())?;
        let target = ctx.config.ml.target_long_side_px;
        result.assets.par_iter().try_for_each(|a| {
            let small = downscale(&a.luma, target);
            save_png(&ws.file(STAGE_DOWNSCALED, &png_name(&a.stem)), &small)
                .map_err(|e| e.to_string())
        })?;
        ws.seal_stage(STAGE_DOWNSCALED).map_err(|e| e.to_string())?;
        let infos: Vec<AssetInfo> = result.assets.iter().map(ImageAsset::info).collect();
        save(ctx, files::ML_IMAGES, &infos)?;
        Ok(format!("{} images to long side {target}", infos.len()))
    }

    fn downscaled(&self, ctx: &TaskContext) -> Res<(Vec<AssetInfo>, Vec<Gray>)> {
        let ws = ml_workspace(ctx);
        let infos: Vec<AssetInfo> = load(ctx, files::ML_IMAGES)?;
        let images = infos
            .iter()
            .map(|i| {
                load_gray_png(&ws.file(STAGE_DOWNSCALED, &png_name(&i.stem)))
                    .map_err(|e| e.to_string())
            })
            .collect::<Res<Vec<_>>>()?;
        Ok((infos, images))
    }

    fn raw_masks(&self, ctx: &TaskContext, infos: &[AssetInfo]) -> Res<Vec<SegmentationMask>> {
        let ws = ml_workspace(ctx);
        let cc = ctx.config.ml.class_count;
        infos
            .iter()
            .map(|i| {
                let g = load_gray_png(&ws.file(STAGE_MASKS_RAW, &png_name(&i.stem)))
                    .map_err(|e| e.to_string())?;
                Ok(SegmentationMask::from_gray(&g, cc))
            })
            .collect()
    }

    fn inference(&self, ctx: &TaskContext) -> Res<String> {
        let ws = ml_workspace(ctx);
        let ml = &ctx.config.ml;
        let (infos, images) = self.downscaled(ctx)?;
        let batch_size = ml.batch_size as usize;
        let batches = run_inference(&images, self.adapter.as_ref(), batch_size, ml.class_count);
        // Masks from good batches are kept even when another batch fails, so
        // the failure report names exactly the images that lack a mask.
        let mut failures = Vec::new();
        let mut written = 0;
        for (b, result) in batches.into_iter().enumerate() {
            let stems = &infos[b * batch_size..((b + 1) * batch_size).min(infos.len())];
            let masks = match result {
                Ok(m) => m,
                Err(e) => {
                    ctx.log(format!("batch {b} failed: {e}"));
                    failures.push(b);
                    continue;
                }
            };
            for (info, m) in stems.iter().zip(&masks) {
                if let Some(&l) = m.labels.iter().find(|&&l| l > u8::MAX as u32) {
                    return Err(format!(
                        "{}: label {l} does not fit an 8-bit mask",
                        info.stem
                    ));
                }
                save_png(
                    &ws.file(STAGE_MASKS_RAW, &png_name(&info.stem)),
                    &m.to_gray(),
                )
                .map_err(|e| e.to_string())?;
                written += 1;
            }
        }
        if !failures.is_empty() {
            ws.seal_stage(STAGE_MASKS_RAW).map_err(|e| e.to_string())?;
            return Err(format!("inference failed for batches {failures:?}"));
        }
        ws.seal_stage(STAGE_MASKS_RAW).map_err(|e| e.to_string())?;
        Ok(format!("{written} masks via {}", self.adapter.name()))
    }

    fn validate(&self, ctx: &TaskContext) -> Res<String> {
        let (infos, images) = self.downscaled(ctx)?;
        let masks = self.raw_masks(ctx, &infos)?;
        let cc = ctx.config.ml.class_count;
        let report: Vec<MaskValidationEntry> = infos
            .iter()
            .zip(images.iter().zip(&masks))
            .map(|(i, (img, m))| MaskValidationEntry {
                stem: i.stem.clone(),
                verdict: validate_mask(m, (img.width, img.height), cc),
            })
            .collect();
        save(ctx, files::MASK_VALIDATION, &report)?;
        let bad: Vec<_> = report.iter().filter(|e| !e.verdict.passed()).collect();
        if let Some(first) = bad.first() {
            for e in &bad {
                ctx.log(format!("{}: {:?}", e.stem, e.verdict));
            }
            return Err(format!(
                "{} of {} masks invalid; first {}: {:?}",
                bad.len(),
                report.len(),
                first.stem,
                first.verdict
            ));
        }
        Ok(format!("{} masks valid", report.len()))
    }

    fn upscale(&self, ctx: &TaskContext) -> Res<String> {
        let ws = ml_workspace(ctx);
        let infos: Vec<AssetInfo> = load(ctx, files::ML_IMAGES)?;
        let raw = self.raw_masks(ctx, &infos)?;
        infos.par_iter().zip(&raw).try_for_each(|(info, m)| {
            let full = upscale_nearest(m, info.width, info.height);
            save_png(
                &ws.file(STAGE_MASKS_FULL, &png_name(&info.stem)),
                &full.to_gray(),
            )
            .map_err(|e| e.to_string())
        })?;
        ws.seal_stage(STAGE_MASKS_FULL).map_err(|e| e.to_string())?;
        Ok(format!("{} masks upscaled", infos.len()))
    }

    fn split(&self, ctx: &TaskContext) -> Res<String> {
        let ws = ml_workspace(ctx);
        let ml = &ctx.config.ml;
        let infos: Vec<AssetInfo> = load(ctx, files::ML_IMAGES)?;
        infos.par_iter().try_for_each(|info| -> Res<()> {
            let g = load_gray_png(&ws.file(STAGE_MASKS_FULL, &png_name(&info.stem)))
                .map_err(|e| e.to_string())?;
            let set = split_binary_masks(
                &SegmentationMask::from_gray(&g, ml.class_count),
                ml.class_count,
            );
            for (grid, name) in set.grids.iter().zip(&ml.class_names) {
                save_png(
                    &ws.file(STAGE_MASKS_BINARY, &binary_mask_name(&info.stem, name)),
                    grid,
                )
                .map_err(|e| e.to_string())?;
            }
            Ok(())
        })?;
        ws.seal_stage(STAGE_MASKS_BINARY)
            .map_err(|e| e.to_string())?;
        Ok(format!(
            "{} binary masks",
            infos.len() * ml.class_count as usize
        ))
    }

    fn binary_sets(&self, ctx: &TaskContext) -> Res<HashMap<String, BinaryMaskSet>> {
        let ws = ml_workspace(ctx);
        let infos: Vec<AssetInfo> = load(ctx, files::ML_IMAGES)?;
        let mut out = HashMap::new();
        for info in infos {
            let grids = ctx
                .config
                .ml
                .class_names
                .iter()
                .map(|name| {
                    load_gray_png(&ws.file(STAGE_MASKS_BINARY, &binary_mask_name(&info.stem, name)))
                        .map_err(|e| e.to_string())
                })
                .collect::<Res<Vec<_>>>()?;
            out.insert(
                info.stem,
                BinaryMaskSet {
                    width: info.width,
                    height: info.height,
                    grids,
                },
            );
        }
        Ok(out)
    }

    fn export_masks(&self, ctx: &TaskContext) -> Res<String> {
        let ws = ml_workspace(ctx);
        let dest = ctx.output_dir.join(MASKS_DIR);
        fs::create_dir_all(&dest).map_err(|e| format!("{}: {e}", dest.display()))?;
        let src = ws.stage_dir(STAGE_MASKS_BINARY);
        let mut n = 0;
        for entry in ws
            .manifest()
            .map_err(|e| e.to_string())?
            .stages
            .get(STAGE_MASKS_BINARY)
            .ok_or("binary masks were never produced")?
        {
            copy(&src.join(&entry.path), &dest.join(&entry.path))?;
            n += 1;
        }
        Ok(format!("{n} masks exported"))
    }

    fn classify(&self, ctx: &TaskContext) -> Res<String> {
        let cloud: PointCloud = load(ctx, files::CLOUD)?;
        let alignment: SparseAlignment = load(ctx, files::ALIGNMENT)?;
        let sets = self.binary_sets(ctx)?;
        let classified = classify_point_cloud(&cloud, &sets, &alignment);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut unlabeled = 0;
        for p in &classified.points {
            match p.class_id {
                Some(c) => *counts.entry(c).or_default() += 1,
                None => unlabeled += 1,
            }
        }
        save(ctx, files::CLASSIFIED_CLOUD, &classified)?;
        ctx.log(format!("class counts {counts:?}, unlabeled {unlabeled}"));
        Ok(format!(
            "{} points classified",
            classified.points.len() - unlabeled
        ))
    }
}

fn copy(from: &Path, to: &Path) -> Res<()> {
    fs::copy(from, to)
        .map(|_| ())
        .map_err(|e| format!("copy {}: {e}", from.display()))
}

impl TaskRunner for PipelineRunner {
    fn run(&self, task: &TaskSpec, ctx: &TaskContext) -> TaskResult {
        let out = match task.kind {
            TaskKind::Shell => return ShellRunner.run(task, ctx),
            TaskKind::Configure => self.configure(ctx),
            TaskKind::ImportImages => self.import(ctx),
            TaskKind::QualityFilter => self.quality(ctx),
            TaskKind::Align => self.align(ctx),
            TaskKind::BuildDepthMaps => self.depth_maps(ctx),
            TaskKind::BuildPointCloud => self.point_cloud(task, ctx),
            TaskKind::BuildTiledModel => self.tiled_model(task, ctx),
            TaskKind::BuildMesh => self.mesh(task, ctx),
            TaskKind::TextureMesh => self.texture(ctx),
            TaskKind::ExportArtifacts => self.export(ctx),
            TaskKind::MlSetup => self.ml_setup(ctx),
            TaskKind::Downscale => self.downscale(ctx),
            TaskKind::Inference => self.inference(ctx),
            TaskKind::ValidateMasks => self.validate(ctx),
            TaskKind::UpscaleMasks => self.upscale(ctx),
            TaskKind::SplitMasks => self.split(ctx),
            TaskKind::ExportMasks => self.export_masks(ctx),
            TaskKind::ClassifyPointCloud => self.classify(ctx),
        }?;
        ctx.log(&out);
        Ok(Some(out))
    }
}
