//! 8-bit grayscale rasters and PNG/JPEG I/O.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("cannot write {path}: {message}")]
    Encode { path: String, message: String },
}

/// Row-major 8-bit grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Gray {
    pub fn new(width: u32, height: u32, fill: u8) -> Self {
        Gray {
            width,
            height,
            data: vec![fill; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Gray {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Rec.601 luma, rounded half up: (299 R + 587 G + 114 B) / 1000.
#[inline]
pub fn luma601(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Decodes a raster and converts it to luma. Alpha is ignored.
pub fn load_luma(path: &Path) -> Result<Gray, ImagingError> {
    let err = |message: String| ImagingError::Decode {
        path: path.display().to_string(),
        message,
    };
    let img = ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (width, height) = rgb.dimensions();
    if width == 0 || height == 0 {
        return Err(err("empty image".into()));
    }
    let data = rgb.pixels().map(|p| luma601(p[0], p[1], p[2])).collect();
    Ok(Gray {
        width,
        height,
        data,
    })
}

pub fn save_png(path: &Path, img: &Gray) -> Result<(), ImagingError> {
    let buf =
        GrayImage::from_raw(img.width, img.height, img.data.clone()).expect("buffer matches dims");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ImagingError::Encode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ImagingError::Encode {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Reads an 8-bit single-channel PNG without any color conversion.
pub fn load_gray_png(path: &Path) -> Result<Gray, ImagingError> {
    let img = image::open(path).map_err(|e| ImagingError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let g = img.into_luma8();
    let (width, height) = g.dimensions();
    Ok(Gray {
        width,
        height,
        data: g.into_raw(),
    })
}

pub fn save_rgb_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<(), ImagingError> {
    let buf = image::RgbImage::from_raw(width, height, rgb.to_vec()).expect("buffer matches dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ImagingError::Encode {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

pub fn to_image(g: &Gray) -> GrayImage {
    let mut out = GrayImage::new(g.width, g.height);
    for (x, y, p) in out.enumerate_pixels_mut() {
        *p = Luma([g.get(x, y)]);
    }
    out
}
