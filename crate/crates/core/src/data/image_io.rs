//! PNG reading and writing for tiles, labels and change maps.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::head::ChangeMap;

/// Channel-major `[3, h, w]` bytes to an interleaved RGB image.
fn to_interleaved(data: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = data[(c * h + y) * w + x];
            }
        }
    }
    out
}

fn from_interleaved(data: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(c * h + y) * w + x] = data[(y * w + x) * 3 + c];
            }
        }
    }
    out
}

pub fn save_rgb(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    let img = RgbImage::from_raw(w as u32, h as u32, to_interleaved(data, h, w))
        .ok_or_else(|| Error::Data("rgb buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn save_gray(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, data.to_vec())
        .ok_or_else(|| Error::Data("gray buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Load an RGB PNG as channel-major bytes, returning (data, h, w).
pub fn load_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((from_interleaved(img.as_raw(), h, w), h, w))
}

/// Load a grayscale PNG, returning (pixels, h, w).
pub fn load_gray(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

/// Load a PNG only if it is stored as 8-bit grayscale.
pub fn load_gray_strict(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Ok((g.into_raw(), h, w))
        }
        other => Err(Error::Data(format!(
            "{}: expected 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Write a change map: grayscale (changed=255) without ground truth, or
/// the four-color diagnostic against it: true positives green, true
/// negatives white, false positives red, false negatives blue.
pub fn write_change_map(map: &ChangeMap, gt: Option<&[u8]>, path: &Path) -> Result<()> {
    match gt {
        None => {
            let pixels: Vec<u8> = map.labels.iter().map(|&l| if l != 0 { 255 } else { 0 }).collect();
            save_gray(path, &pixels, map.h, map.w)
        }
        Some(gt) => {
            if gt.len() != map.labels.len() {
                return Err(Error::dims(
                    "change map vs ground truth",
                    &[map.labels.len()],
                    &[gt.len()],
                ));
            }
            let mut rgb = vec![0u8; map.h * map.w * 3];
            for (i, (&p, &g)) in map.labels.iter().zip(gt).enumerate() {
                let color: [u8; 3] = match (p != 0, g != 0) {
                    (true, true) => [0, 255, 0],
                    (false, false) => [255, 255, 255],
                    (true, false) => [255, 0, 0],
                    (false, true) => [0, 0, 255],
                };
                rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
            let img = RgbImage::from_raw(map.w as u32, map.h as u32, rgb)
                .ok_or_else(|| Error::Data("rgb buffer size mismatch".into()))?;
            img.save(path)?;
            Ok(())
        }
    }
}
