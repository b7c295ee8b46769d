//! Grayscale scene input from PNG or PGM files.

use std::path::Path;

use anyhow::{Context, Result};
use asp_vision::sensor::Image;

/// Reads an image file as grayscale intensities in `[0, 1]`. Color inputs
/// are converted to luma.
pub fn load_gray(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    let values = luma.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect();
    Ok(Image::new(h as usize, w as usize, values)?)
}

/// Writes an image as 8-bit binary PGM.
pub fn save_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut data = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    data.extend(img.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}
