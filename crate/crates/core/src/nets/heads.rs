//! Anomaly detection head and mask upsampling head.

use candle_core::Tensor;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nets::layers::{Builder, Conv, ConvBlock};
use crate::nets::resize::match_size;
use crate::types::Level;

/// U-Net over `concat(I_gen, I_spc)`. The encoder descends to input / 16 and
/// the decoder climbs back to the configured mask level, emitting two logits.
pub(crate) struct Detector {
    enc: Vec<ConvBlock>,
    up: Vec<ConvBlock>,
    fuse: Vec<ConvBlock>,
    head: Conv,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.detector_width;
        // widths at strides 1, 2, 4, 8, 16
        let widths = [c, c, 2 * c, 2 * c, 4 * c];
        let mut enc = vec![b.block("detector.enc0", 6, widths[0], 1)?];
        for i in 1..widths.len() {
            enc.push(b.block(&format!("detector.enc{i}"), widths[i - 1], widths[i], 2)?);
        }
        let target = stride_index(cfg.mask_level);
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for (j, i) in (target..widths.len() - 1).rev().enumerate() {
            up.push(b.up_block(&format!("detector.up{j}"), widths[i + 1], widths[i])?);
            fuse.push(b.block(&format!("detector.fuse{j}"), 2 * widths[i], widths[i], 1)?);
        }
        let head = b.conv("detector.head", widths[target], 2, 1, 1)?;
        Ok(Self { enc, up, fuse, head })
    }

    /// `(B, 2, H / s, W / s)` logits, class 1 anomalous.
    pub fn forward(&self, i_gen: &Tensor, i_spc: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut x = Tensor::cat(&[i_gen, i_spc], 1)?;
        for e in &self.enc {
            x = e.forward(&x)?;
            skips.push(x.clone());
        }
        let n = skips.len();
        for (j, (u, f)) in self.up.iter().zip(&self.fuse).enumerate() {
            let skip = &skips[n - 2 - j];
            let (_, _, sh, sw) = skip.dims4()?;
            x = match_size(&u.forward(&x)?, sh, sw)?;
            x = f.forward(&Tensor::cat(&[&x, skip], 1)?)?;
        }
        Ok(self.head.forward(&x)?)
    }
}

fn stride_index(level: Level) -> usize {
    match level {
        Level::Hi => 2,
        Level::Lo => 3,
    }
}

/// Small U-Net over `concat(I, M_up)` producing full-resolution logits.
pub(crate) struct Upsampler {
    enc: [ConvBlock; 3],
    up: [ConvBlock; 2],
    fuse: [ConvBlock; 2],
    head: Conv,
}

impl Upsampler {
    pub fn new<R: Rng + ?Sized>(b: &mut Builder<'_, R>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.upsampler_width;
        Ok(Self {
            enc: [
                b.block("upsampler.enc0", 4, c, 1)?,
                b.block("upsampler.enc1", c, 2 * c, 2)?,
                b.block("upsampler.enc2", 2 * c, 2 * c, 2)?,
            ],
            up: [
                b.up_block("upsampler.up0", 2 * c, 2 * c)?,
                b.up_block("upsampler.up1", 2 * c, c)?,
            ],
            fuse: [
                b.block("upsampler.fuse0", 4 * c, 2 * c, 1)?,
                b.block("upsampler.fuse1", 2 * c, c, 1)?,
            ],
            head: b.conv("upsampler.head", c, 2, 1, 1)?,
        })
    }

    pub fn forward(&self, image: &Tensor, m_up: &Tensor) -> Result<Tensor> {
        let e0 = self.enc[0].forward(&Tensor::cat(&[image, m_up], 1)?)?;
        let e1 = self.enc[1].forward(&e0)?;
        let e2 = self.enc[2].forward(&e1)?;
        let mut x = e2;
        for (i, skip) in [&e1, &e0].into_iter().enumerate() {
            let (_, _, sh, sw) = skip.dims4()?;
            x = match_size(&self.up[i].forward(&x)?, sh, sw)?;
            x = self.fuse[i].forward(&Tensor::cat(&[&x, skip], 1)?)?;
        }
        Ok(self.head.forward(&x)?)
    }
}
