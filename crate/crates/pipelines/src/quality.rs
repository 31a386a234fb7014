//! Image quality metrics: Laplacian-variance sharpness and exposure clipping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowgate_core::config::PhotogrammetryConfig;

use crate::imaging::Gray;
use crate::import::ImageAsset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Keep,
    RejectBlurry,
    RejectOverexposed,
    RejectUnderexposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub blur_variance: f64,
    pub overexposed_fraction: f64,
    pub underexposed_fraction: f64,
    pub verdict: Verdict,
}

/// Population variance of the 3×3 Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]`
/// over interior pixels. Images without interior pixels score 0.
pub fn laplacian_variance(img: &Gray) -> f64 {
    if img.width < 3 || img.height < 3 {
        return 0.0;
    }
    let (mut n, mut sum, mut sum_sq) = (0i128, 0i128, 0i128);
    for y in 1..img.height - 1 {
        for x in 1..img.width - 1 {
            let r = img.get(x, y - 1) as i128
                + img.get(x, y + 1) as i128
                + img.get(x - 1, y) as i128
                + img.get(x + 1, y) as i128
                - 4 * img.get(x, y) as i128;
            n += 1;
            sum += r;
            sum_sq += r * r;
        }
    }
    // Exact in integers, one division at the end.
    (n * sum_sq - sum * sum) as f64 / (n * n) as f64
}

/// Shares of pixels `>= over` and `<= under`.
pub fn exposure_fractions(img: &Gray, over: u8, under: u8) -> (f64, f64) {
    let n = img.pixel_count().max(1) as f64;
    let hi = img.data.iter().filter(|&&v| v >= over).count() as f64;
    let lo = img.data.iter().filter(|&&v| v <= under).count() as f64;
    (hi / n, lo / n)
}

/// Checks in order blurry, overexposed, underexposed; the first failure
/// names the verdict.
pub fn assess(img: &Gray, cfg: &PhotogrammetryConfig) -> QualityReport {
    let blur_variance = laplacian_variance(img);
    let (over, under) = exposure_fractions(
        img,
        cfg.overexposed_pixel_value,
        cfg.underexposed_pixel_value,
    );
    let verdict = if blur_variance < cfg.blur_variance_min {
        Verdict::RejectBlurry
    } else if over > cfg.exposure_fraction_max {
        Verdict::RejectOverexposed
    } else if under > cfg.exposure_fraction_max {
        Verdict::RejectUnderexposed
    } else {
        Verdict::Keep
    };
    QualityReport {
        blur_variance,
        overexposed_fraction: over,
        underexposed_fraction: under,
        verdict,
    }
}

pub struct Filtered {
    pub kept: Vec<ImageAsset>,
    pub rejected: Vec<(ImageAsset, QualityReport)>,
}

/// Scores every asset (in parallel) and splits on the verdict. Input order
/// is preserved within each list.
pub fn quality_filter(assets: Vec<ImageAsset>, cfg: &PhotogrammetryConfig) -> Filtered {
    let reports: Vec<QualityReport> = assets.par_iter().map(|a| assess(&a.luma, cfg)).collect();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (mut asset, report) in assets.into_iter().zip(reports) {
        asset.quality = Some(report.clone());
        if report.verdict == Verdict::Keep {
            kept.push(asset);
        } else {
            rejected.push((asset, report));
        }
    }
    Filtered { kept, rejected }
}
