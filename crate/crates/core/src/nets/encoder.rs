//! Quantized latent encoder and general appearance decoder.

use candle_core::Tensor;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{DsrError, Result};
use crate::nets::layers::{Builder, Conv, ConvBlock, ResBlock};
use crate::nets::resize::upsample_nearest;

/// Image to `F_lo` (input / 8); the hi branch turns the input / 4 features
/// plus the upsampled `Q_lo` into `F_hi`.
pub(crate) struct Encoder {
    stem: ConvBlock,
    down_hi: ConvBlock,
    res_hi: ResBlock,
    down_lo: ConvBlock,
    res_lo: ResBlock,
    proj_lo: Conv,
    fuse_hi: ConvBlock,
    res_fuse: ResBlock,
    proj_hi: Conv,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, cfg: &ModelConfig) -> Result<Self> {
        let (w, d) = (cfg.base_width, cfg.embed_dim);
        Ok(Self {
            stem: b.block("encoder.stem", 3, w / 2, 2)?,
            down_hi: b.block("encoder.down_hi", w / 2, w, 2)?,
            res_hi: b.res("encoder.res_hi", w)?,
            down_lo: b.block("encoder.down_lo", w, w, 2)?,
            res_lo: b.res("encoder.res_lo", w)?,
            proj_lo: b.conv("encoder.proj_lo", w, d, 1, 1)?,
            fuse_hi: b.block("encoder.fuse_hi", w + d, w, 1)?,
            res_fuse: b.res("encoder.res_fuse", w)?,
            proj_hi: b.conv("encoder.proj_hi", w, d, 1, 1)?,
        })
    }

    /// Returns the input / 4 trunk features and `F_lo`.
    pub fn lo(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.res_hi.forward(&self.down_hi.forward(&self.stem.forward(images)?)?)?;
        let l = self.res_lo.forward(&self.down_lo.forward(&h)?)?;
        Ok((h, self.proj_lo.forward(&l)?))
    }

    pub fn hi(&self, trunk: &Tensor, q_lo: &Tensor) -> Result<Tensor> {
        let up = upsample_nearest(q_lo, 2)?;
        let x = Tensor::cat(&[trunk, &up], 1)?;
        let x = self.res_fuse.forward(&self.fuse_hi.forward(&x)?)?;
        Ok(self.proj_hi.forward(&x)?)
    }
}

/// `concat(Q_hi, up(Q_lo))`, a projection, two residual blocks and two
/// transposed-convolution upsamplings back to input resolution.
pub(crate) struct GeneralDecoder {
    input: ConvBlock,
    res1: ResBlock,
    res2: ResBlock,
    up1: ConvBlock,
    up2: ConvBlock,
    out: Conv,
}

impl GeneralDecoder {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, cfg: &ModelConfig) -> Result<Self> {
        let (w, d) = (cfg.base_width, cfg.embed_dim);
        Ok(Self {
            input: b.block("general_decoder.input", 2 * d, w, 1)?,
            res1: b.res("general_decoder.res1", w)?,
            res2: b.res("general_decoder.res2", w)?,
            up1: b.up_block("general_decoder.up1", w, w / 2)?,
            up2: b.up_block("general_decoder.up2", w / 2, w / 2)?,
            out: b.conv("general_decoder.out", w / 2, 3, 3, 1)?,
        })
    }

    pub fn forward(&self, q_hi: &Tensor, q_lo: &Tensor) -> Result<Tensor> {
        let x = concat_levels(q_hi, q_lo)?;
        let x = self.res2.forward(&self.res1.forward(&self.input.forward(&x)?)?)?;
        let x = self.up2.forward(&self.up1.forward(&x)?)?;
        Ok(self.out.forward(&x)?)
    }
}

/// Checks that the lo grid is half the hi grid and stacks them at hi size.
pub(crate) fn concat_levels(q_hi: &Tensor, q_lo: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = q_hi.dims4()?;
    let (bl, _, hl, wl) = q_lo.dims4()?;
    if b != bl || h != 2 * hl || w != 2 * wl {
        return Err(DsrError::contract(format!(
            "hi grid {b}x{h}x{w} is not twice lo grid {bl}x{hl}x{wl}"
        )));
    }
    Ok(Tensor::cat(&[q_hi, &upsample_nearest(q_lo, 2)?], 1)?)
}
