//! Seeded synthetic surveys: directories of small PNGs with a known mix of
//! sharp, blurry, overexposed and underexposed frames.

use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::imaging::{save_png, Gray, ImagingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurveySpec {
    pub sharp: usize,
    pub blurry: usize,
    pub overexposed: usize,
    pub underexposed: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for SurveySpec {
    fn default() -> Self {
        SurveySpec {
            sharp: 9,
            blurry: 1,
            overexposed: 1,
            underexposed: 1,
            width: 64,
            height: 64,
            seed: 7,
        }
    }
}

impl SurveySpec {
    pub fn total(&self) -> usize {
        self.sharp + self.blurry + self.overexposed + self.underexposed
    }
}

/// Mid-tone noise: strong Laplacian response, no clipped pixels.
pub fn sharp_frame(rng: &mut StdRng, w: u32, h: u32) -> Gray {
    fill(w, h, || rng.gen_range(30..=220))
}

fn fill(w: u32, h: u32, mut f: impl FnMut() -> u8) -> Gray {
    Gray {
        width: w,
        height: h,
        data: (0..w as usize * h as usize).map(|_| f()).collect(),
    }
}

/// A shallow gradient: the Laplacian is zero away from rounding.
pub fn blurry_frame(rng: &mut StdRng, w: u32, h: u32) -> Gray {
    let base: u32 = rng.gen_range(80..120);
    Gray::from_fn(w, h, |x, y| (base + (x + y) / 4) as u8)
}

/// Textured, but most pixels saturated at `clip`.
fn clipped_frame(rng: &mut StdRng, w: u32, h: u32, clip: u8) -> Gray {
    fill(w, h, || {
        if rng.gen_bool(0.6) {
            clip
        } else {
            rng.gen_range(30..=220)
        }
    })
}

/// Writes the survey into `dir` and returns the paths in name order.
/// Frames are named by category so sorted order is stable.
pub fn generate_survey(dir: &Path, spec: &SurveySpec) -> Result<Vec<PathBuf>, ImagingError> {
    std::fs::create_dir_all(dir).map_err(|e| ImagingError::Encode {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut out = Vec::new();
    let mut emit = |name: String, img: Gray| -> Result<(), ImagingError> {
        let p = dir.join(name);
        save_png(&p, &img)?;
        out.push(p);
        Ok(())
    };
    for i in 0..spec.sharp {
        let img = sharp_frame(&mut rng, w, h);
        emit(format!("frame_{i:03}.png"), img)?;
    }
    for i in 0..spec.blurry {
        let img = blurry_frame(&mut rng, w, h);
        emit(format!("reject_blurry_{i:03}.png"), img)?;
    }
    for i in 0..spec.overexposed {
        let img = clipped_frame(&mut rng, w, h, 255);
        emit(format!("reject_over_{i:03}.png"), img)?;
    }
    for i in 0..spec.underexposed {
        let img = clipped_frame(&mut rng, w, h, 0);
        emit(format!("reject_under_{i:03}.png"), img)?;
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::{assess, Verdict};
    use flowgate_core::config::PhotogrammetryConfig;

    #[test]
    fn frames_get_the_intended_verdicts() {
        let cfg = PhotogrammetryConfig::default();
        let mut rng = StdRng::seed_from_u64(1);
        assert_eq!(
            assess(&sharp_frame(&mut rng, 64, 64), &cfg).verdict,
            Verdict::Keep
        );
        assert_eq!(
            assess(&blurry_frame(&mut rng, 64, 64), &cfg).verdict,
            Verdict::RejectBlurry
        );
        assert_eq!(
            assess(&clipped_frame(&mut rng, 64, 64, 255), &cfg).verdict,
            Verdict::RejectOverexposed
        );
        assert_eq!(
            assess(&clipped_frame(&mut rng, 64, 64, 0), &cfg).verdict,
            Verdict::RejectUnderexposed
        );
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SurveySpec::default();
        let pa = generate_survey(a.path(), &spec).unwrap();
        let pb = generate_survey(b.path(), &spec).unwrap();
        assert_eq!(pa.len(), spec.total());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
}
