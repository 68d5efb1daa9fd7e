//! Focal loss over two-class anomaly maps.

use candle_core::{Tensor, D};

use crate::error::{DsrError, Result};
use crate::types::{AnomalyMask, SegmentationMap};

/// Focal loss on `(B, 2, H, W)` logits against a `(B, 1, H, W)` 0/1 target,
/// mean-reduced over pixels:
/// `-alpha_t * (1 - p_t)^gamma * log(p_t)` with `p_t` the probability of the
/// true class. `alpha` weights the anomalous class (`1 - alpha` the normal
/// one); `None` leaves both classes at weight 1.
pub fn focal_loss_from_logits(logits: &Tensor, target: &Tensor, gamma: f64, alpha: Option<f64>) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(DsrError::contract(format!("focal loss expects 2 class logits, got {c}")));
    }
    if target.dims() != [b, 1, h, w] {
        return Err(DsrError::contract(format!(
            "target {:?} does not match logits {:?}",
            target.dims(),
            logits.dims()
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus(3))?;
    let logp0 = logp.narrow(1, 0, 1)?;
    let logp1 = logp.narrow(1, 1, 1)?;
    let not_t = target.affine(-1.0, 1.0)?;
    let logpt = ((target * &logp1)? + (&not_t * &logp0)?)?;
    let one_minus = logpt.exp()?.affine(-1.0, 1.0)?.relu()?;
    let modulator = modulation(&one_minus, gamma)?;
    let mut per_pixel = (modulator * logpt)?.neg()?;
    if let Some(a) = alpha {
        let weight = target.affine(2.0 * a - 1.0, 1.0 - a)?;
        per_pixel = (per_pixel * weight)?;
    }
    Ok(per_pixel.mean_all()?)
}

fn modulation(x: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma == 0.0 {
        return Ok(x.ones_like()?);
    }
    if gamma.fract() == 0.0 && gamma <= 8.0 {
        let mut out = x.clone();
        for _ in 1..gamma as usize {
            out = (out * x)?;
        }
        return Ok(out);
    }
    Ok(x.clamp(1e-12, 1.0)?.powf(gamma)?)
}

/// Host-side focal loss of a probability map against a binary mask.
pub fn focal_loss(predicted: &SegmentationMap, target: &AnomalyMask, gamma: f64, alpha: Option<f64>) -> Result<f64> {
    if (predicted.height(), predicted.width()) != (target.height(), target.width()) {
        return Err(DsrError::contract(format!(
            "map {}x{} and mask {}x{} differ in resolution",
            predicted.height(),
            predicted.width(),
            target.height(),
            target.width()
        )));
    }
    let n = predicted.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p as f64;
            let (pt, weight) = if t != 0 {
                (p, alpha.unwrap_or(1.0))
            } else {
                (1.0 - p, alpha.map_or(1.0, |a| 1.0 - a))
            };
            if pt >= 1.0 {
                0.0
            } else {
                -weight * (1.0 - pt).powf(gamma) * pt.max(1e-12).ln()
            }
        })
        .sum();
    Ok(total / n as f64)
}
