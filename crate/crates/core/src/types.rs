//! Host-side image, mask and map containers shared by every stage.
//!
//! Network code works on batched `candle` tensors; these types are the
//! per-image values that cross module boundaries (datasets, synthesis,
//! evaluation) and are converted to and from tensors at the edges.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DsrError, Result};

/// Resolution level of a latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Input / 4.
    Hi,
    /// Input / 8.
    Lo,
}

impl Level {
    /// Spatial reduction factor relative to the input image.
    pub fn stride(self) -> usize {
        match self {
            Level::Hi => 4,
            Level::Lo => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Hi => "hi",
            Level::Lo => "lo",
        }
    }
}

/// RGB image, planar CHW layout, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    /// Wraps planar RGB data. Dimensions must be multiples of 8 and every
    /// value must lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_divisible(height, width)?;
        if data.len() != Self::CHANNELS * height * width {
            return Err(DsrError::contract(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DsrError::contract(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; Self::CHANNELS * height * width])
    }

    /// Builds an image from an arbitrary-range tensor of shape `(3, H, W)`,
    /// clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != Self::CHANNELS {
            return Err(DsrError::contract(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Mirrors the image left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] =
                        self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (Self::CHANNELS, self.height, self.width),
            device,
        )?)
    }
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor.
pub fn stack_images(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| DsrError::contract("cannot stack an empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(DsrError::contract(format!(
                "batch mixes {}x{} and {h}x{w} images",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

/// Binary anomaly mask (1 = anomalous).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AnomalyMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl AnomalyMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Any non-zero entry is treated as anomalous.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(DsrError::contract(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    /// Max-pools by an integer factor; a cell is set when any covered pixel is.
    pub fn max_pool(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(DsrError::contract(format!(
                "cannot max-pool a {}x{} mask by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(h, w);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }
}

/// Stacks masks into a `(B, 1, H, W)` float tensor of 0/1 values.
pub fn stack_masks(masks: &[&AnomalyMask], device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| DsrError::contract("cannot stack an empty mask batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(DsrError::contract("batch mixes mask sizes"));
        }
        data.extend(m.data.iter().map(|&v| f32::from(v)));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapResolution {
    /// Hi feature grid resolution (input / 4).
    Feature,
    Full,
}

/// Per-pixel anomaly probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
    resolution: MapResolution,
}

impl SegmentationMap {
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<f32>,
        resolution: MapResolution,
    ) -> Result<Self> {
        if data.len() != height * width {
            return Err(DsrError::contract(format!(
                "map data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DsrError::contract(format!("map value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            resolution,
        })
    }

    /// Splits a `(B, 1, H, W)` probability tensor into per-image maps.
    pub fn from_batch(t: &Tensor, resolution: MapResolution) -> Result<Vec<Self>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(DsrError::contract(format!(
                "map tensor has {c} channels, expected 1"
            )));
        }
        let flat = t.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks(h * w)
            .take(b)
            .map(|chunk| {
                let data = chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                Self::new(h, w, data, resolution)
            })
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn resolution(&self) -> MapResolution {
        self.resolution
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len().max(1) as f32
    }

    /// Thresholds at `t` (inclusive).
    pub fn binarize(&self, t: f32) -> AnomalyMask {
        AnomalyMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v >= t)).collect(),
        }
    }
}

pub(crate) fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(DsrError::contract(format!(
            "image dimensions {height}x{width} must be positive multiples of 8"
        )));
    }
    Ok(())
}
