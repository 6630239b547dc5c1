//! PNG storage for patches (RGB8) and masks (single-channel 0/255).

use std::path::Path;

use image::{GrayImage, ImageBuffer, RgbImage};

use crate::datamodel::{Mask, Patch};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_patch(path: &Path) -> Result<Patch> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Patch::new(h as usize, w as usize, data)
}

pub fn write_patch(path: &Path, patch: &Patch) -> Result<()> {
    let raw: Vec<u8> = patch.data().iter().map(|&v| quantize(v)).collect();
    let img = RgbImage::from_raw(patch.width() as u32, patch.height() as u32, raw)
        .expect("buffer matches dimensions");
    save(path, &img)
}

/// Accepts masks stored as {0, 1} or {0, 255}; anything else, including a
/// mix of 1 and 255, is rejected.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let has_one = raw.contains(&1);
    let has_full = raw.contains(&255);
    if let Some(v) = raw.iter().find(|&&v| v != 0 && v != 1 && v != 255) {
        return Err(Error::invalid(format!(
            "{}: mask value {v} is not binary",
            path.display()
        )));
    }
    if has_one && has_full {
        return Err(Error::invalid(format!(
            "{}: mask mixes values 1 and 255",
            path.display()
        )));
    }
    let data = raw.into_iter().map(|v| u8::from(v != 0)).collect();
    Mask::new(h as usize, w as usize, data)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer matches dimensions");
    save(path, &img)
}

/// Tints foreground pixels toward `color` at the given opacity.
pub fn overlay(patch: &Patch, mask: &Mask, color: [f32; 3], alpha: f32) -> Result<Patch> {
    if patch.height() != mask.height() || patch.width() != mask.width() {
        return Err(Error::shape("overlay mask does not match the image"));
    }
    let mut out = patch.clone();
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            if mask.get(y, x) == 1 {
                let p = patch.pixel(y, x);
                let blended = [0, 1, 2].map(|c| (1.0 - alpha) * p[c] + alpha * color[c]);
                out.set_pixel(y, x, blended);
            }
        }
    }
    Ok(out)
}
