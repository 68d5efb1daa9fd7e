//! Subspace restriction modules and the object-specific decoder.

use candle_core::Tensor;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nets::encoder::concat_levels;
use crate::nets::layers::{Builder, Conv, ConvBlock};
use crate::nets::resize::match_size;
use crate::types::Level;

/// Encoder-decoder over one quantized grid: three strided blocks down,
/// three transposed blocks up, optional U-Net skips, projected back to `D`.
pub(crate) struct Restriction {
    input: ConvBlock,
    down: [ConvBlock; 3],
    up: [ConvBlock; 3],
    fuse: Option<[ConvBlock; 3]>,
    out: Conv,
}

impl Restriction {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, cfg: &ModelConfig, level: Level) -> Result<Self> {
        let (w, d) = (cfg.base_width, cfg.embed_dim);
        let p = format!("restrict_{}", level.name());
        let input = b.block(&format!("{p}.input"), d, w, 1)?;
        let down = [
            b.block(&format!("{p}.down0"), w, w, 2)?,
            b.block(&format!("{p}.down1"), w, w, 2)?,
            b.block(&format!("{p}.down2"), w, w, 2)?,
        ];
        let up = [
            b.up_block(&format!("{p}.up0"), w, w)?,
            b.up_block(&format!("{p}.up1"), w, w)?,
            b.up_block(&format!("{p}.up2"), w, w)?,
        ];
        let fuse = if cfg.restrict_skips {
            Some([
                b.block(&format!("{p}.fuse0"), 2 * w, w, 1)?,
                b.block(&format!("{p}.fuse1"), 2 * w, w, 1)?,
                b.block(&format!("{p}.fuse2"), 2 * w, w, 1)?,
            ])
        } else {
            None
        };
        let out = b.conv(&format!("{p}.out"), w, d, 1, 1)?;
        Ok(Self {
            input,
            down,
            up,
            fuse,
            out,
        })
    }

    pub fn forward(&self, q: &Tensor) -> Result<Tensor> {
        let x0 = self.input.forward(q)?;
        let x1 = self.down[0].forward(&x0)?;
        let x2 = self.down[1].forward(&x1)?;
        let x3 = self.down[2].forward(&x2)?;
        let mut h = x3;
        for (i, skip) in [&x2, &x1, &x0].into_iter().enumerate() {
            let (_, _, sh, sw) = skip.dims4()?;
            h = match_size(&self.up[i].forward(&h)?, sh, sw)?;
            if let Some(fuse) = &self.fuse {
                h = fuse[i].forward(&Tensor::cat(&[&h, skip], 1)?)?;
            }
        }
        Ok(self.out.forward(&h)?)
    }
}

/// `concat(Q~_hi, up(Q~_lo))` through two strided blocks and four
/// transposed-convolution blocks to input resolution.
pub(crate) struct ObjectDecoder {
    input: ConvBlock,
    down: [ConvBlock; 2],
    up: [ConvBlock; 4],
    out: Conv,
}

impl ObjectDecoder {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, cfg: &ModelConfig) -> Result<Self> {
        let (w, d) = (cfg.base_width, cfg.embed_dim);
        Ok(Self {
            input: b.block("object_decoder.input", 2 * d, w, 1)?,
            down: [
                b.block("object_decoder.down0", w, w, 2)?,
                b.block("object_decoder.down1", w, w, 2)?,
            ],
            up: [
                b.up_block("object_decoder.up0", w, w)?,
                b.up_block("object_decoder.up1", w, w)?,
                b.up_block("object_decoder.up2", w, w / 2)?,
                b.up_block("object_decoder.up3", w / 2, w / 2)?,
            ],
            out: b.conv("object_decoder.out", w / 2, 3, 3, 1)?,
        })
    }

    pub fn forward(&self, q_hi: &Tensor, q_lo: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = q_hi.dims4()?;
        let mut x = self.input.forward(&concat_levels(q_hi, q_lo)?)?;
        for d in &self.down {
            x = d.forward(&x)?;
        }
        for u in &self.up {
            x = u.forward(&x)?;
        }
        let x = match_size(&x, 4 * h, 4 * w)?;
        Ok(self.out.forward(&x)?)
    }
}
