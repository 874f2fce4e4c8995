//! 8-bit RGB files to and from `(3, h, w)` arrays in `[-1, 1]`.

use std::path::Path;

use image::{imageops::FilterType, ImageFormat, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

/// `round((v + 1)·127.5)`, with `v` clamped to `[-1, 1]`.
pub fn encode_value(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn decode_value(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn to_rgb8(data: &Array3<f64>) -> Result<RgbImage> {
    let (c, h, w) = data.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 color channels, got {c}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            encode_value(data[[0, y, x]]),
            encode_value(data[[1, y, x]]),
            encode_value(data[[2, y, x]]),
        ])
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        decode_value(img.get_pixel(x as u32, y as u32)[c])
    })
}

/// Writes a PNG.
pub fn save_png(path: impl AsRef<Path>, data: &Array3<f64>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(data)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads a PNG or JPEG as 8-bit RGB.
pub fn load_rgb8(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::InvalidArgument(format!(
            "{}: only PNG and JPEG inputs are supported",
            path.display()
        )));
    }
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    Ok(from_rgb8(&load_rgb8(path)?))
}

/// Resizes so the shorter edge becomes `short` pixels, keeping the aspect
/// ratio (longer edge rounded to the nearest pixel).
pub fn resize_short_edge(img: &RgbImage, short: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w.min(h) == short {
        return img.clone();
    }
    let scale = short as f64 / w.min(h) as f64;
    let (nw, nh) = if w <= h {
        (short, ((h as f64 * scale).round() as u32).max(short))
    } else {
        (((w as f64 * scale).round() as u32).max(short), short)
    };
    image::imageops::resize(img, nw, nh, FilterType::Triangle)
}

/// True for extensions the loader accepts.
pub fn is_supported(path: &Path) -> bool {
    matches!(
        ImageFormat::from_path(path),
        Ok(ImageFormat::Png) | Ok(ImageFormat::Jpeg)
    )
}
