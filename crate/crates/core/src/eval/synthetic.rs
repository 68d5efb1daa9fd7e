//! Benchmarks on held-out normal images with synthetic ground truth.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::Result;
use crate::eval::metrics::{auroc, average_precision, image_score, ScoreAccumulator};
use crate::nets::{resize_bilinear, DsrModel};
use crate::synth::{inject_anomalies, simulate_smudge, Sampling};
use crate::types::{stack_images, AnomalyMask, ImageTensor, Level, MapResolution, SegmentationMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEval {
    /// AP of `M` against the injected mask at the mask level.
    pub pixel_ap: f64,
    pub image_auroc: f64,
    pub image_ap: f64,
}

/// Every second image receives a fresh latent injection; the rest stay
/// normal. Scores come from the full detection path on the grids.
pub fn evaluate_latent_injections(
    model: &DsrModel,
    images: &[ImageTensor],
    synth: &SynthConfig,
    sampling: &Sampling,
    seed: u64,
) -> Result<SyntheticEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = model.config().mask_level;
    let mut pixels = ScoreAccumulator::new();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (ci, chunk) in images.chunks(8).enumerate() {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = stack_images(&refs, model.device())?;
        let enc = model.encode_frozen(&x)?;
        let inj = inject_anomalies(
            &enc.q_hi,
            &enc.q_lo,
            model.codebook(Level::Hi),
            model.codebook(Level::Lo),
            sampling,
            synth,
            rng.random(),
        )?;
        let inject: Vec<bool> = (0..chunk.len()).map(|i| (ci * 8 + i) % 2 == 1).collect();
        // take injected grids for the chosen images, clean ones elsewhere
        let pick = |clean: &Tensor, anom: &Tensor| -> Result<Tensor> {
            let rows = inject
                .iter()
                .enumerate()
                .map(|(i, &a)| if a { anom.narrow(0, i, 1) } else { clean.narrow(0, i, 1) })
                .collect::<candle_core::Result<Vec<_>>>()?;
            Ok(Tensor::cat(&rows, 0)?)
        };
        let q_hi = pick(&enc.q_hi.data, &inj.q_hi.data)?;
        let q_lo = pick(&enc.q_lo.data, &inj.q_lo.data)?;
        let i_gen = model.decode_general(&q_hi, &q_lo)?;
        let i_spc = model.decode_object_specific(&q_hi, &q_lo)?.image;
        let m = model.detect(&i_gen, &i_spc)?;
        let maps = SegmentationMap::from_batch(&m, MapResolution::Feature)?;
        let level_masks = match level {
            Level::Hi => &inj.mask_hi,
            Level::Lo => &inj.mask_lo,
        };
        for (i, map) in maps.iter().enumerate() {
            let gt = if inject[i] {
                level_masks[i].clone()
            } else {
                AnomalyMask::zeros(map.height(), map.width())
            };
            pixels.extend_map(map, &gt)?;
            scores.push(image_score(map));
            labels.push(inject[i]);
        }
    }
    Ok(SyntheticEval {
        pixel_ap: pixels.average_precision()?,
        image_auroc: auroc(&scores, &labels)?,
        image_ap: average_precision(&scores, &labels)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementEval {
    /// IoU of the thresholded `M_r` with the smudge masks, pooled over all pixels.
    pub iou_refined: f64,
    /// The same for bilinearly upsampled `M`.
    pub iou_bilinear: f64,
}

/// Smudges every image and compares both full-resolution maps at `threshold`.
pub fn evaluate_refinement(
    model: &DsrModel,
    images: &[ImageTensor],
    synth: &SynthConfig,
    seed: u64,
    threshold: f32,
) -> Result<RefinementEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ir, mut ur, mut ib, mut ub) = (0usize, 0usize, 0usize, 0usize);
    for chunk in images.chunks(8) {
        let mut smudged = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for img in chunk {
            let (s, m) = simulate_smudge(img, rng.random(), synth)?;
            smudged.push(s);
            masks.push(m);
        }
        let refs: Vec<&ImageTensor> = smudged.iter().collect();
        let x = stack_images(&refs, model.device())?;
        let (_, _, h, w) = x.dims4()?;
        let out = model.infer(&x)?;
        let refined = SegmentationMap::from_batch(&out.refined, MapResolution::Full)?;
        let bilinear = SegmentationMap::from_batch(&resize_bilinear(&out.mask, h, w)?, MapResolution::Full)?;
        for ((r, b), gt) in refined.iter().zip(&bilinear).zip(&masks) {
            for (i, &g) in gt.data().iter().enumerate() {
                let g = g != 0;
                let pr = r.data()[i] >= threshold;
                let pb = b.data()[i] >= threshold;
                ir += (pr && g) as usize;
                ur += (pr || g) as usize;
                ib += (pb && g) as usize;
                ub += (pb || g) as usize;
            }
        }
    }
    let ratio = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(RefinementEval {
        iou_refined: ratio(ir, ur),
        iou_bilinear: ratio(ib, ub),
    })
}
