//! Photogrammetry and segmentation pipelines: image import and quality
//! gating, a pluggable reconstruction engine, tiling and export, and the
//! mask post-processing chain.

pub mod export;
pub mod imaging;
pub mod import;
pub mod ml;
pub mod quality;
pub mod recon;
pub mod runner;
pub mod synthetic;
pub mod tiling;

pub use runner::PipelineRunner;
