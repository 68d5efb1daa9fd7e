//! PNG/JPEG reading with resizing, and PNG writing.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{DsrError, Result};
use crate::types::{AnomalyMask, ImageTensor};

/// How non-square sources reach the square working resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Stretch to the target size, distorting the aspect ratio.
    #[default]
    Stretch,
    /// Scale the long side to the target and centre on a black canvas.
    Pad,
}

fn image_err(path: &Path, source: image::ImageError) -> DsrError {
    DsrError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn fit<P: image::Pixel + 'static>(
    img: &image::ImageBuffer<P, Vec<P::Subpixel>>,
    size: usize,
    policy: ResizePolicy,
    filter: FilterType,
) -> image::ImageBuffer<P, Vec<P::Subpixel>>
where
    P::Subpixel: 'static,
{
    let s = size as u32;
    match policy {
        ResizePolicy::Stretch => {
            if img.dimensions() == (s, s) {
                img.clone()
            } else {
                imageops::resize(img, s, s, filter)
            }
        }
        ResizePolicy::Pad => {
            let (w, h) = img.dimensions();
            let scale = s as f64 / w.max(h) as f64;
            let nw = ((w as f64 * scale).round() as u32).clamp(1, s);
            let nh = ((h as f64 * scale).round() as u32).clamp(1, s);
            let inner = imageops::resize(img, nw, nh, filter);
            let mut canvas = image::ImageBuffer::new(s, s);
            imageops::replace(&mut canvas, &inner, ((s - nw) / 2) as i64, ((s - nh) / 2) as i64);
            canvas
        }
    }
}

/// Reads an RGB image scaled to `[0, 1]`, resized bilinearly to `size` when given.
pub fn read_image(path: &Path, size: Option<usize>, policy: ResizePolicy) -> Result<ImageTensor> {
    let rgb = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let rgb = match size {
        Some(s) => fit(&rgb, s, policy, FilterType::Triangle),
        None => rgb,
    };
    rgb_to_tensor(&rgb)
}

/// Reads a mask; nonzero pixels are anomalous. Resizing is nearest-neighbour
/// followed by re-binarization.
pub fn read_mask(path: &Path, size: Option<usize>, policy: ResizePolicy) -> Result<AnomalyMask> {
    let gray = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let gray = match size {
        Some(s) => fit(&gray, s, policy, FilterType::Nearest),
        None => gray,
    };
    let (w, h) = gray.dimensions();
    AnomalyMask::from_vec(
        h as usize,
        w as usize,
        gray.pixels().map(|p| u8::from(p.0[0] > 127)).collect(),
    )
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Result<ImageTensor> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(h, w, data)
}

pub fn tensor_to_rgb(img: &ImageTensor) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| to_u8(img.get(c, y as usize, x as usize));
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save<P, C>(buf: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DsrError::io(dir, e))?;
    }
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn write_image(img: &ImageTensor, path: &Path) -> Result<()> {
    save(&tensor_to_rgb(img), path)
}

pub fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    save(img, path)
}

/// Writes a mask as black/white.
pub fn write_mask(mask: &AnomalyMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    save(&img, path)
}

/// Writes values in `[0, 1]` as 8-bit grayscale.
pub fn write_gray(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(DsrError::contract(format!(
            "{} values for a {height}x{width} image",
            values.len()
        )));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_u8(values[y as usize * width + x as usize])])
    });
    save(&img, path)
}
