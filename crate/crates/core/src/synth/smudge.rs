//! Image-space copy-paste smudges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::error::{DsrError, Result};
use crate::synth::perlin::{perlin_mask_with, MaskSpec};
use crate::types::{AnomalyMask, ImageTensor};

/// Blend weight and source offset of one smudge. The patch under the mask
/// is read from `(y + dy, x + dx)`, wrapping at the borders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmudgeParams {
    pub alpha: f32,
    pub dy: usize,
    pub dx: usize,
}

/// Pastes a noise-shaped patch taken from elsewhere in the same image.
pub fn simulate_smudge(image: &ImageTensor, seed: u64, cfg: &SynthConfig) -> Result<(ImageTensor, AnomalyMask)> {
    smudge_with(image, seed, &MaskSpec::smudge(cfg), cfg)
}

/// A self-pasted anomaly over the anomaly-mask area window instead of the
/// smudge window.
pub fn paste_image_anomaly(image: &ImageTensor, seed: u64, cfg: &SynthConfig) -> Result<(ImageTensor, AnomalyMask)> {
    smudge_with(image, seed, &MaskSpec::anomaly(cfg), cfg)
}

fn smudge_with(
    image: &ImageTensor,
    seed: u64,
    spec: &MaskSpec,
    cfg: &SynthConfig,
) -> Result<(ImageTensor, AnomalyMask)> {
    let (h, w) = (image.height(), image.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = perlin_mask_with(h, w, rng.random(), spec)?.mask;
    let alpha = if cfg.smudge_alpha_max > cfg.smudge_alpha_min {
        rng.random_range(cfg.smudge_alpha_min..=cfg.smudge_alpha_max)
    } else {
        cfg.smudge_alpha_min
    } as f32;
    // keep the source at least an eighth of the image away
    let dy = rng.random_range(h / 8..=h - h / 8);
    let dx = rng.random_range(w / 8..=w - w / 8);
    let out = apply_smudge(image, &mask, SmudgeParams { alpha, dy, dx })?;
    Ok((out, mask))
}

pub fn apply_smudge(image: &ImageTensor, mask: &AnomalyMask, p: SmudgeParams) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(DsrError::contract(format!(
            "smudge mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if !(0.0..=1.0).contains(&p.alpha) {
        return Err(DsrError::contract(format!("smudge alpha {} outside [0, 1]", p.alpha)));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let (sy, sx) = ((y + p.dy) % h, (x + p.dx) % w);
            for c in 0..ImageTensor::CHANNELS {
                let v = (1.0 - p.alpha) * image.get(c, y, x) + p.alpha * image.get(c, sy, sx);
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}
