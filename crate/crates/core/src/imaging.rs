//! Small image utilities: bilinear resampling, mirroring, IR conversion, PNG IO
//! and the conversion into network input tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Per-channel normalisation applied to `[0, 1]` pixel values before the backbone.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

fn source_coord(dst: usize, scale: f32, len: usize) -> (usize, usize, f32) {
    let s = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f32)
}

/// Bilinear resize of a single row-major plane using half-pixel centres.
pub fn resize_plane(src: &[f32], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<f32> {
    if w == new_w && h == new_h {
        return src.to_vec();
    }
    let (sx, sy) = (w as f32 / new_w as f32, h as f32 / new_h as f32);
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let (y0, y1, fy) = source_coord(y, sy, h);
        for x in 0..new_w {
            let (x0, x1, fx) = source_coord(x, sx, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Bilinear resize of an RGB image. Channels are resampled independently with
/// identical weights, so channel-identical (IR) images stay channel-identical.
pub fn resize_rgb(img: &RgbImage, new_w: u32, new_h: u32) -> RgbImage {
    if img.dimensions() == (new_w, new_h) {
        return img.clone();
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| {
            let plane: Vec<f32> = img.pixels().map(|p| p.0[c] as f32).collect();
            resize_plane(&plane, w, h, new_w as usize, new_h as usize)
        })
        .collect();
    RgbImage::from_fn(new_w, new_h, |x, y| {
        let i = (y * new_w + x) as usize;
        Rgb([0, 1, 2].map(|c| planes[c][i].round().clamp(0.0, 255.0) as u8))
    })
}

pub fn flip_rgb(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

/// Converts to a grayscale IR-style image: Rec. 601 luminance scaled by
/// `brightness`, rounded, replicated into all three channels.
pub fn make_night(img: &RgbImage, brightness: f64) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let [r, g, b] = img.get_pixel(x, y).0;
        let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        let v = (luma * brightness).round().clamp(0.0, 255.0) as u8;
        Rgb([v, v, v])
    })
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path)?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(Error::MalformedImage(format!(
            "{}: expected 8-bit RGB PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Stacks images into a normalised `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::contract("no images to convert"));
    };
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::contract("images in one batch must share a size"));
        }
        for c in 0..3 {
            data.extend(
                img.pixels()
                    .map(|p| (p.0[c] as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD),
            );
        }
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?;
    Ok(t.to_dtype(dtype)?)
}
