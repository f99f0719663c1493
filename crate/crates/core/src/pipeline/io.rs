//! 8-bit image I/O and the pixel ↔ float conversion.
//!
//! Pixels `p` in `0..=255` map to `p / 127.5 − 1` in `[-1, 1]`; the inverse
//! rounds `(v + 1) · 127.5` to the nearest byte, so the round trip is exact.

use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Shape};

pub fn load_rgb(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path)?.to_rgb8();
    Ok(from_rgb_image(&img))
}

pub fn from_rgb_image(img: &RgbImage) -> Grid<u8> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_fn(Shape::new(3, h, w), |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c]
    })
}

pub fn to_rgb_image(pixels: &Grid<u8>) -> Result<RgbImage> {
    let s = pixels.shape();
    if s.channels != 3 && s.channels != 1 {
        return Err(Error::invalid(format!(
            "cannot save a {}-channel image",
            s.channels
        )));
    }
    let mut img = RgbImage::new(s.width as u32, s.height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            px[c] = *pixels.get(c.min(s.channels - 1), y as usize, x as usize);
        }
    }
    Ok(img)
}

pub fn save_rgb(path: &Path, pixels: &Grid<u8>) -> Result<()> {
    to_rgb_image(pixels)?.save(path)?;
    Ok(())
}

pub fn to_unit(pixels: &Grid<u8>) -> Image {
    pixels.map(|p| *p as f64 / 127.5 - 1.0)
}

pub fn to_pixels(image: &Image) -> Grid<u8> {
    image.map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
}

/// Rec. 601 luma on the 0..255 scale.
pub fn to_gray(pixels: &Grid<u8>) -> Grid<f64> {
    let s = pixels.shape();
    Grid::from_fn(Shape::plane(s.height, s.width), |_, y, x| {
        if s.channels >= 3 {
            0.299 * *pixels.get(0, y, x) as f64
                + 0.587 * *pixels.get(1, y, x) as f64
                + 0.114 * *pixels.get(2, y, x) as f64
        } else {
            *pixels.get(0, y, x) as f64
        }
    })
}

pub fn resize_rgb(pixels: &Grid<u8>, height: usize, width: usize) -> Result<Grid<u8>> {
    let s = pixels.shape();
    if (s.height, s.width) == (height, width) {
        return Ok(pixels.clone());
    }
    let img = to_rgb_image(pixels)?;
    let out = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
    Ok(from_rgb_image(&out))
}

/// File stem used as the image identifier.
pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files in a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    out.sort();
    Ok(out)
}

/// Expand directories into their PNG files; plain files pass through.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_images(p)?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}
