//! PNG/JPEG reading and writing.
//!
//! Pixel convention: an 8-bit value `p` maps to `(p - 128) / 128`, so
//! mid-gray 128 is exactly 0.0 and the representable range is
//! `[-1, 127/128]`. Saving inverts this with rounding and clamps to `[0, 255]`.
//! Channel order is RGB; tensors are `(1, 3, H, W)` images and `(1, 1, H, W)`
//! masks.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use twostream_autograd::Tensor;

use crate::error::{Error, Result};

pub fn to_unit(p: u8) -> f64 {
    (p as f64 - 128.0) / 128.0
}

pub fn from_unit(x: f64) -> u8 {
    (x * 128.0 + 128.0).round().clamp(0.0, 255.0) as u8
}

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Largest centered crop with the target aspect ratio.
fn center_crop(img: DynamicImage, [th, tw]: [usize; 2]) -> DynamicImage {
    let (w, h) = (img.width() as u64, img.height() as u64);
    let (th, tw) = (th as u64, tw as u64);
    let (cw, ch) = if w * th > h * tw { (h * tw / th, h) } else { (w, w * th / tw) };
    let (cw, ch) = (cw.max(1), ch.max(1));
    img.crop_imm(((w - cw) / 2) as u32, ((h - ch) / 2) as u32, cw as u32, ch as u32)
}

fn fit(img: DynamicImage, size: [usize; 2], filter: FilterType) -> DynamicImage {
    let img = center_crop(img, size);
    let [h, w] = size;
    if img.width() as usize == w && img.height() as usize == h {
        img
    } else {
        img.resize_exact(w as u32, h as u32, filter)
    }
}

/// `[height, width]` of an image file, read from its header.
pub fn image_dimensions(path: &Path) -> Result<[usize; 2]> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let (w, h) = reader.into_dimensions().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok([h as usize, w as usize])
}

/// Center-crop to the target aspect ratio, resize, and normalize.
pub fn load_image(path: &Path, size: [usize; 2]) -> Result<Tensor<f64>> {
    let rgb = fit(open(path)?, size, FilterType::Triangle).to_rgb8();
    Ok(rgb_to_tensor(&rgb))
}

/// Binary mask, nonzero = hole. Resizing uses nearest-neighbor sampling.
pub fn load_mask(path: &Path, size: [usize; 2]) -> Result<Tensor<f64>> {
    let gray = fit(open(path)?, size, FilterType::Nearest).to_luma8();
    Ok(Tensor::from_fn([1, 1, size[0], size[1]], |[_, _, y, x]| {
        if gray.get_pixel(x as u32, y as u32)[0] != 0 {
            1.0
        } else {
            0.0
        }
    }))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor<f64> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| to_unit(rgb.get_pixel(x as u32, y as u32)[c]))
}

/// First batch item of a `(N, 3, H, W)` tensor as an 8-bit image.
pub fn tensor_to_rgb(t: &Tensor<f64>) -> Result<RgbImage> {
    let s = t.shape();
    if s.c() != 3 {
        return Err(Error::Input(format!("expected 3 channels, got {s:?}")));
    }
    Ok(RgbImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| from_unit(t.get([0, c, y as usize, x as usize]))))
    }))
}

fn write(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_image(t: &Tensor<f64>, path: &Path) -> Result<()> {
    write(DynamicImage::ImageRgb8(tensor_to_rgb(t)?), path)
}

/// Mask as 0/255 grayscale.
pub fn save_mask(mask: &Tensor<f64>, path: &Path) -> Result<()> {
    let s = mask.shape();
    let img = GrayImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        image::Luma([if mask.get([0, 0, y as usize, x as usize]) > 0.5 { 255 } else { 0 }])
    });
    write(DynamicImage::ImageLuma8(img), path)
}

/// Row-major 8-bit grayscale plane.
pub fn save_gray(pixels: &[u8], [h, w]: [usize; 2], path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, pixels.to_vec())
        .ok_or_else(|| Error::Input(format!("{} pixels for {h}x{w}", pixels.len())))?;
    write(DynamicImage::ImageLuma8(img), path)
}
