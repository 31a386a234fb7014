//! Builds the post-event analysis DAG from a run configuration.
//!
//! ```text
//! configure ─ import_images ─ quality_filter ─ align ─ build_depth_maps ─┬─ build_point_cloud ─┬─ build_tiled_model
//!                                                                        │                     └─ build_model_cloud ─ texture_model   (point_cloud_first)
//!                                                                        └─ build_model_depth                                         (depth_maps_direct)
//! configure ─ ml_setup ─ downscale ─ inference ─ validate_masks ─ upscale_masks ─ split_masks ─┬─ export_masks
//!                                                                                              └─ classify_point_cloud (+ build_point_cloud)
//! export_artifacts waits on the cloud, the tiles, the variant's final mesh and, with ML
//! enabled, the classified cloud.
//! ```
//!
//! Tasks that belong to the variant not selected stay in the graph with
//! `skip = true`.

use crate::config::{RunConfig, Variant};
use crate::dag::{DagSpec, ResourceHint, TaskKind, TaskSpec};

pub const PIPELINE_DAG_ID: &str = "post-event-analysis";
pub const DEFAULT_TILE_LEVELS: u32 = 3;

pub mod task_ids {
    pub const CONFIGURE: &str = "configure";
    pub const IMPORT_IMAGES: &str = "import_images";
    pub const QUALITY_FILTER: &str = "quality_filter";
    pub const ALIGN: &str = "align";
    pub const BUILD_DEPTH_MAPS: &str = "build_depth_maps";
    pub const BUILD_POINT_CLOUD: &str = "build_point_cloud";
    pub const BUILD_TILED_MODEL: &str = "build_tiled_model";
    pub const BUILD_MODEL_DEPTH: &str = "build_model_depth";
    pub const BUILD_MODEL_CLOUD: &str = "build_model_cloud";
    pub const TEXTURE_MODEL: &str = "texture_model";
    pub const EXPORT_ARTIFACTS: &str = "export_artifacts";
    pub const ML_SETUP: &str = "ml_setup";
    pub const DOWNSCALE: &str = "downscale";
    pub const INFERENCE: &str = "inference";
    pub const VALIDATE_MASKS: &str = "validate_masks";
    pub const UPSCALE_MASKS: &str = "upscale_masks";
    pub const SPLIT_MASKS: &str = "split_masks";
    pub const EXPORT_MASKS: &str = "export_masks";
    pub const CLASSIFY_POINT_CLOUD: &str = "classify_point_cloud";
}

use task_ids::*;

/// Parameter naming where a mesh or cloud task takes its input from.
pub const PARAM_SOURCE: &str = "source";
pub const SOURCE_DEPTH_MAPS: &str = "depth_maps";
pub const SOURCE_POINT_CLOUD: &str = "point_cloud";
pub const PARAM_LEVELS: &str = "levels";

pub fn config_to_dag(config: &RunConfig) -> DagSpec {
    let res = &config.resources;
    let heavy = ResourceHint {
        cpus: res.cpus,
        memory_mb: res.memory_mb,
        gpus: 0,
    };
    let with_hint = |mut t: TaskSpec, hint: ResourceHint| {
        t.resource_hint = hint;
        t
    };
    let point_cloud_first = config.photogrammetry.variant == Variant::PointCloudFirst;

    let mut dag = DagSpec::new(PIPELINE_DAG_ID, 1)
        .with_task(TaskSpec::new(CONFIGURE, TaskKind::Configure))
        .with_task(TaskSpec::new(IMPORT_IMAGES, TaskKind::ImportImages).after([CONFIGURE]))
        .with_task(with_hint(
            TaskSpec::new(QUALITY_FILTER, TaskKind::QualityFilter).after([IMPORT_IMAGES]),
            heavy,
        ))
        .with_task(with_hint(
            TaskSpec::new(ALIGN, TaskKind::Align).after([QUALITY_FILTER]),
            heavy,
        ))
        .with_task(with_hint(
            TaskSpec::new(BUILD_DEPTH_MAPS, TaskKind::BuildDepthMaps).after([ALIGN]),
            ResourceHint {
                gpus: res.gpus,
                ..heavy
            },
        ))
        .with_task(with_hint(
            TaskSpec::new(BUILD_POINT_CLOUD, TaskKind::BuildPointCloud)
                .after([BUILD_DEPTH_MAPS])
                .param(
                    PARAM_SOURCE,
                    if point_cloud_first {
                        SOURCE_POINT_CLOUD
                    } else {
                        SOURCE_DEPTH_MAPS
                    },
                ),
            heavy,
        ))
        .with_task(
            TaskSpec::new(BUILD_TILED_MODEL, TaskKind::BuildTiledModel)
                .after([BUILD_POINT_CLOUD])
                .param(PARAM_LEVELS, DEFAULT_TILE_LEVELS.to_string()),
        )
        .with_task(with_hint(
            TaskSpec::new(BUILD_MODEL_DEPTH, TaskKind::BuildMesh)
                .after([BUILD_DEPTH_MAPS])
                .param(PARAM_SOURCE, SOURCE_DEPTH_MAPS)
                .skipped(point_cloud_first),
            heavy,
        ))
        .with_task(with_hint(
            TaskSpec::new(BUILD_MODEL_CLOUD, TaskKind::BuildMesh)
                .after([BUILD_POINT_CLOUD])
                .param(PARAM_SOURCE, SOURCE_POINT_CLOUD)
                .skipped(!point_cloud_first),
            heavy,
        ))
        .with_task(
            TaskSpec::new(TEXTURE_MODEL, TaskKind::TextureMesh)
                .after([BUILD_MODEL_CLOUD])
                .skipped(!point_cloud_first),
        );

    let mut export_upstream = vec![
        BUILD_POINT_CLOUD,
        BUILD_TILED_MODEL,
        if point_cloud_first {
            TEXTURE_MODEL
        } else {
            BUILD_MODEL_DEPTH
        },
    ];

    if config.ml.enabled {
        dag = dag
            .with_task(TaskSpec::new(ML_SETUP, TaskKind::MlSetup).after([CONFIGURE]))
            .with_task(with_hint(
                TaskSpec::new(DOWNSCALE, TaskKind::Downscale).after([ML_SETUP]),
                heavy,
            ))
            .with_task(with_hint(
                TaskSpec::new(INFERENCE, TaskKind::Inference).after([DOWNSCALE]),
                ResourceHint {
                    cpus: 1,
                    memory_mb: res.memory_mb,
                    gpus: res.gpus,
                },
            ))
            .with_task(with_hint(
                TaskSpec::new(VALIDATE_MASKS, TaskKind::ValidateMasks).after([INFERENCE]),
                heavy,
            ))
            .with_task(with_hint(
                TaskSpec::new(UPSCALE_MASKS, TaskKind::UpscaleMasks).after([VALIDATE_MASKS]),
                heavy,
            ))
            .with_task(with_hint(
                TaskSpec::new(SPLIT_MASKS, TaskKind::SplitMasks).after([UPSCALE_MASKS]),
                heavy,
            ))
            .with_task(TaskSpec::new(EXPORT_MASKS, TaskKind::ExportMasks).after([SPLIT_MASKS]))
            .with_task(
                TaskSpec::new(CLASSIFY_POINT_CLOUD, TaskKind::ClassifyPointCloud).after([
                    SPLIT_MASKS,
                    BUILD_POINT_CLOUD,
                    ALIGN,
                ]),
            );
        export_upstream.push(CLASSIFY_POINT_CLOUD);
    }

    dag.with_task(TaskSpec::new(EXPORT_ARTIFACTS, TaskKind::ExportArtifacts).after(export_upstream))
}
