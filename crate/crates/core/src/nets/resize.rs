//! Differentiable resampling built from matrix products.

use candle_core::Tensor;

use crate::error::{DsrError, Result};

/// Row-major `(out, inp)` interpolation matrix using half-pixel centres
/// (no corner alignment), edges clamped.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f32> {
    let mut m = vec![0f32; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let l = (src - i0 as f64) as f32;
        m[i * inp + i0] += 1.0 - l;
        m[i * inp + i1] += l;
    }
    m
}

/// Bilinear resize of a `(B, C, h, w)` tensor to `(B, C, height, width)`.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    if h == 0 || w == 0 || height == 0 || width == 0 {
        return Err(DsrError::contract("cannot resize an empty tensor"));
    }
    let dev = x.device();
    let rx = Tensor::from_vec(bilinear_matrix(width, w), (width, w), dev)?.t()?;
    let ry = Tensor::from_vec(bilinear_matrix(height, h), (1, height, h), dev)?;
    let t = x.reshape((b * c * h, w))?.matmul(&rx)?.reshape((b * c, h, width))?;
    let t = ry.broadcast_matmul(&t)?;
    Ok(t.reshape((b, c, height, width))?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * factor, w * factor)?)
}

/// Matches the spatial size of `x` to `(height, width)` when a strided path
/// rounded differently.
pub(crate) fn match_size(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    resize_bilinear(x, height, width)
}
