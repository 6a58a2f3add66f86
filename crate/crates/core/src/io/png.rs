//! PNG codecs for color, 16-bit depth and detector masks.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::image::{DepthImage, Mask, RgbImage};

/// Depth PNG units per meter.
pub const DEPTH_SCALE: f64 = 5000.0;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        message: e.to_string(),
    })
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?;
    atomic_write(path, buf.get_ref())
}

/// 8-bit (or 16-bit) color scaled to `[0, 1]`.
pub fn read_color_png(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    Ok(RgbImage::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        p.map(|v| v as f64 / 65535.0)
    }))
}

pub fn write_color_png(path: &Path, color: &RgbImage) -> Result<()> {
    let buf = ImageBuffer::from_fn(color.width as u32, color.height as u32, |x, y| {
        Rgb(color
            .get(x as usize, y as usize)
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    save(path, DynamicImage::ImageRgb8(buf))
}

/// 16-bit depth in units of 1/5000 m; zero marks missing depth.
pub fn read_depth_png(path: &Path) -> Result<DepthImage> {
    let img = open(path)?;
    let img = match img {
        DynamicImage::ImageLuma16(b) => b,
        other => other.into_luma16(),
    };
    let (w, h) = img.dimensions();
    Ok(DepthImage::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / DEPTH_SCALE
    }))
}

pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let buf = ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
        let d = depth.get(x as usize, y as usize);
        let v = if d.is_finite() && d > 0.0 {
            (d * DEPTH_SCALE).round().min(u16::MAX as f64) as u16
        } else {
            0
        };
        Luma([v])
    });
    save(path, DynamicImage::ImageLuma16(buf))
}

/// Detector mask: nonzero marks a dynamic pixel. Returns it inverted, true
/// where the pixel is static.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32).0[0] == 0
    }))
}

/// Writes a static-pixel mask in detector polarity (255 = dynamic).
pub fn write_mask_png(path: &Path, static_mask: &Mask) -> Result<()> {
    let buf = ImageBuffer::from_fn(
        static_mask.width as u32,
        static_mask.height as u32,
        |x, y| {
            Luma([if static_mask.get(x as usize, y as usize) {
                0u8
            } else {
                255
            }])
        },
    );
    save(path, DynamicImage::ImageLuma8(buf))
}

/// Values in `[0, 1]` as 16-bit gray.
pub fn write_unit_png(path: &Path, values: &DepthImage) -> Result<()> {
    let buf = ImageBuffer::from_fn(values.width as u32, values.height as u32, |x, y| {
        let v = values.get(x as usize, y as usize);
        Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    save(path, DynamicImage::ImageLuma16(buf))
}
