//! 2D gradient noise and thresholded noise masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::error::{DsrError, Result};
use crate::types::AnomalyMask;

/// Gradient-noise field over a lattice of `scale_y x scale_x` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PerlinField {
    pub height: usize,
    pub width: usize,
    pub scale_y: u32,
    pub scale_x: u32,
    pub seed: u64,
    pub data: Vec<f32>,
}

#[inline]
fn fade(t: f32) -> f32 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

impl PerlinField {
    /// Both scales must be powers of two; the field is a pure function of
    /// `(height, width, scale_y, scale_x, seed)`.
    pub fn generate(height: usize, width: usize, scale_y: u32, scale_x: u32, seed: u64) -> Result<Self> {
        if !scale_y.is_power_of_two() || !scale_x.is_power_of_two() {
            return Err(DsrError::contract(format!(
                "noise scales must be powers of two, got {scale_y}x{scale_x}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(DsrError::contract("noise field must be non-empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gy, gx) = (scale_y as usize + 1, scale_x as usize + 1);
        let gradients: Vec<(f32, f32)> = (0..gy * gx)
            .map(|_| {
                let a = rng.random_range(0.0..std::f32::consts::TAU);
                (a.cos(), a.sin())
            })
            .collect();
        let grad = |iy: usize, ix: usize| gradients[iy * gx + ix];

        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let fy = y as f32 * scale_y as f32 / height as f32;
            let iy = (fy as usize).min(scale_y as usize - 1);
            let ty = fy - iy as f32;
            for x in 0..width {
                let fx = x as f32 * scale_x as f32 / width as f32;
                let ix = (fx as usize).min(scale_x as usize - 1);
                let tx = fx - ix as f32;
                let dot = |cy: usize, cx: usize| {
                    let (gxv, gyv) = grad(iy + cy, ix + cx);
                    gxv * (tx - cx as f32) + gyv * (ty - cy as f32)
                };
                let n0 = lerp(dot(0, 0), dot(0, 1), fade(tx));
                let n1 = lerp(dot(1, 0), dot(1, 1), fade(tx));
                data.push(lerp(n0, n1, fade(ty)));
            }
        }
        Ok(Self {
            height,
            width,
            scale_y,
            scale_x,
            seed,
            data,
        })
    }

    /// Min-max normalized copy in `[0, 1]`; a constant field maps to zeros.
    pub fn normalized(&self) -> Vec<f32> {
        let lo = self.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        if span <= 0.0 {
            return vec![0.0; self.data.len()];
        }
        self.data.iter().map(|v| (v - lo) / span).collect()
    }

    /// Cells whose normalized value exceeds `threshold`.
    pub fn binarize(&self, threshold: f32) -> AnomalyMask {
        let data = self
            .normalized()
            .into_iter()
            .map(|v| u8::from(v > threshold))
            .collect();
        AnomalyMask::from_vec(self.height, self.width, data).expect("sizes match")
    }
}

/// Outcome of [`perlin_mask`].
#[derive(Clone, Debug)]
pub struct PerlinMask {
    pub mask: AnomalyMask,
    /// Attempts consumed (1-based).
    pub tries: usize,
    /// False when no attempt landed in the area window; `mask` is then the
    /// last attempt.
    pub in_range: bool,
}

/// Area window and threshold range used by [`perlin_mask`].
#[derive(Clone, Copy, Debug)]
pub struct MaskSpec {
    pub min_exponent: u32,
    pub max_exponent: u32,
    pub threshold_min: f64,
    pub threshold_max: f64,
    pub min_area: f64,
    pub max_area: f64,
    pub max_tries: usize,
}

impl MaskSpec {
    pub fn anomaly(cfg: &SynthConfig) -> Self {
        Self {
            min_exponent: cfg.perlin_min_exponent,
            max_exponent: cfg.perlin_max_exponent,
            threshold_min: cfg.threshold_min,
            threshold_max: cfg.threshold_max,
            min_area: cfg.min_area,
            max_area: cfg.max_area,
            max_tries: cfg.max_tries,
        }
    }

    pub fn smudge(cfg: &SynthConfig) -> Self {
        Self {
            min_area: cfg.smudge_min_area,
            max_area: cfg.smudge_max_area,
            ..Self::anomaly(cfg)
        }
    }
}

/// Binary mask from thresholded gradient noise, resampled until its
/// anomalous fraction falls in the configured window.
pub fn perlin_mask(height: usize, width: usize, seed: u64, cfg: &SynthConfig) -> Result<PerlinMask> {
    perlin_mask_with(height, width, seed, &MaskSpec::anomaly(cfg))
}

pub fn perlin_mask_with(height: usize, width: usize, seed: u64, spec: &MaskSpec) -> Result<PerlinMask> {
    if height < 8 || width < 8 {
        return Err(DsrError::contract(format!(
            "mask dimensions {height}x{width} must be at least 8"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = AnomalyMask::zeros(height, width);
    for attempt in 1..=spec.max_tries.max(1) {
        let ey = rng.random_range(spec.min_exponent..=spec.max_exponent);
        let ex = rng.random_range(spec.min_exponent..=spec.max_exponent);
        let field = PerlinField::generate(height, width, 1 << ey, 1 << ex, rng.random())?;
        let threshold = if spec.threshold_max > spec.threshold_min {
            rng.random_range(spec.threshold_min..spec.threshold_max)
        } else {
            spec.threshold_min
        };
        last = field.binarize(threshold as f32);
        let frac = last.fraction();
        if frac >= spec.min_area && frac <= spec.max_area {
            return Ok(PerlinMask {
                mask: last,
                tries: attempt,
                in_range: true,
            });
        }
    }
    log::warn!(
        "noise mask {height}x{width} (seed {seed}) missed the area window after {} tries",
        spec.max_tries
    );
    Ok(PerlinMask {
        mask: last,
        tries: spec.max_tries.max(1),
        in_range: false,
    })
}
