//! Procedural texture images: a mixed corpus for the first stage, a
//! single-appearance "object" corpus for the later stages, and test sets
//! with painted-in defects.

use std::f32::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::data::dataset::Sample;
use crate::data::io::{write_image, write_mask};
use crate::error::Result;
use crate::synth::{perlin_mask, PerlinField};
use crate::types::{AnomalyMask, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Stripes,
    Checker,
    Dots,
    Weave,
    Marble,
    Grid,
}

impl TextureKind {
    pub const ALL: [TextureKind; 6] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::Dots,
        TextureKind::Weave,
        TextureKind::Marble,
        TextureKind::Grid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::Dots => "dots",
            TextureKind::Weave => "weave",
            TextureKind::Marble => "marble",
            TextureKind::Grid => "grid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Everything that determines a rendered texture.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureParams {
    pub kind: TextureKind,
    /// Pattern periods across the image.
    pub frequency: f32,
    pub angle: f32,
    pub phase: (f32, f32),
    pub background: [f32; 3],
    pub foreground: [f32; 3],
    pub noise: f32,
    pub noise_seed: u64,
}

impl TextureParams {
    pub fn random<R: Rng + ?Sized>(kind: TextureKind, rng: &mut R) -> Self {
        let mut color = |lo: f32, hi: f32| [0; 3].map(|_: i32| rng.random_range(lo..hi));
        let background = color(0.1, 0.5);
        let foreground = color(0.5, 0.9);
        Self {
            kind,
            frequency: rng.random_range(3.0..7.0),
            angle: rng.random_range(0.0..TAU),
            phase: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            background,
            foreground,
            noise: rng.random_range(0.01..0.04),
            noise_seed: rng.random(),
        }
    }

    /// The same appearance with a new phase, a slightly perturbed
    /// orientation and scale, and fresh grain.
    pub fn jitter<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        Self {
            frequency: self.frequency * rng.random_range(0.97..1.03),
            angle: self.angle + rng.random_range(-0.05..0.05),
            phase: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            noise_seed: rng.random(),
            ..self.clone()
        }
    }

    pub fn render(&self, size: usize) -> Result<ImageTensor> {
        let s = size as f32;
        let (sin, cos) = self.angle.sin_cos();
        let turbulence = match self.kind {
            TextureKind::Marble => Some(PerlinField::generate(size, size, 4, 4, self.noise_seed ^ 0xA5A5)?.normalized()),
            _ => None,
        };
        let grain = PerlinField::generate(size, size, 16, 16, self.noise_seed)?.normalized();
        let f = self.frequency;
        let mut data = vec![0.0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 / s, y as f32 / s);
                let u = (fx * cos + fy * sin) * f + self.phase.0;
                let v = (-fx * sin + fy * cos) * f + self.phase.1;
                let t = match self.kind {
                    TextureKind::Stripes => 0.5 + 0.5 * (TAU * u).sin(),
                    TextureKind::Checker => {
                        let c = (TAU * u).sin() * (TAU * v).sin();
                        smoothstep(-0.15, 0.15, c)
                    }
                    TextureKind::Dots => {
                        let (du, dv) = (u - u.round(), v - v.round());
                        1.0 - smoothstep(0.22, 0.3, (du * du + dv * dv).sqrt())
                    }
                    TextureKind::Weave => {
                        let cell = (u.floor() + v.floor()) as i64;
                        let w = if cell.rem_euclid(2) == 0 { u } else { v };
                        0.5 + 0.5 * (TAU * 3.0 * w).sin()
                    }
                    TextureKind::Marble => {
                        let n = turbulence.as_ref().map_or(0.0, |t| t[y * size + x]);
                        0.5 + 0.5 * (TAU * (u + 1.5 * n)).sin()
                    }
                    TextureKind::Grid => {
                        let d = (u - u.round()).abs().min((v - v.round()).abs());
                        1.0 - smoothstep(0.05, 0.09, d)
                    }
                };
                let g = (grain[y * size + x] - 0.5) * 2.0 * self.noise;
                for c in 0..3 {
                    let val = self.background[c] + t * (self.foreground[c] - self.background[c]) + g;
                    data[c * size * size + y * size + x] = val.clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor::new(size, size, data)
    }
}

fn smoothstep(a: f32, b: f32, x: f32) -> f32 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// `n` images cycling through every texture kind with independent parameters.
pub fn natural_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TextureParams::random(TextureKind::ALL[i % TextureKind::ALL.len()], &mut rng).render(size))
        .collect()
}

/// A fixed appearance drawn from `seed`, rendered `n` times with jitter.
#[derive(Clone, Debug)]
pub struct ObjectTexture {
    pub base: TextureParams,
}

impl ObjectTexture {
    pub fn new(kind: TextureKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            base: TextureParams::random(kind, &mut rng),
        }
    }

    pub fn images(&self, n: usize, size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.base.jitter(&mut rng).render(size)).collect()
    }

    /// Normal and defective test images. Defects are painted under a noise
    /// mask and alternate between a foreign texture, a colour shift and a
    /// misaligned copy of the object's own pattern.
    pub fn defect_set(
        &self,
        n_normal: usize,
        n_defect: usize,
        size: usize,
        seed: u64,
        synth: &SynthConfig,
    ) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.base.kind.name();
        let mut out = Vec::with_capacity(n_normal + n_defect);
        for i in 0..n_normal {
            out.push(Sample {
                id: format!("{kind}/test/good/{i:03}"),
                category: kind.into(),
                image: self.base.jitter(&mut rng).render(size)?,
                anomalous: false,
                mask: None,
            });
        }
        for i in 0..n_defect {
            let normal = self.base.jitter(&mut rng);
            let image = normal.render(size)?;
            let mask = perlin_mask(size, size, rng.random(), synth)?.mask;
            let (name, patch) = match i % 3 {
                0 => {
                    let others: Vec<TextureKind> =
                        TextureKind::ALL.into_iter().filter(|&k| k != self.base.kind).collect();
                    let k = others[rng.random_range(0..others.len())];
                    ("foreign", TextureParams::random(k, &mut rng).render(size)?)
                }
                1 => {
                    let shift = [0; 3].map(|_: i32| {
                        let m: f32 = rng.random_range(0.15..0.3);
                        if rng.random::<bool>() { m } else { -m }
                    });
                    let mut p = image.clone();
                    for c in 0..3 {
                        for y in 0..size {
                            for x in 0..size {
                                p.set(c, y, x, (image.get(c, y, x) + shift[c]).clamp(0.0, 1.0));
                            }
                        }
                    }
                    ("tint", p)
                }
                _ => {
                    let mut p = normal.clone();
                    p.phase = (normal.phase.0 + 0.5, normal.phase.1 + 0.25);
                    p.angle += rng.random_range(0.3..0.8);
                    ("misaligned", p.render(size)?)
                }
            };
            let mut img = image.clone();
            for y in 0..size {
                for x in 0..size {
                    if mask.get(y, x) {
                        for c in 0..3 {
                            img.set(c, y, x, patch.get(c, y, x));
                        }
                    }
                }
            }
            out.push(Sample {
                id: format!("{kind}/test/{name}/{i:03}"),
                category: kind.into(),
                image: img,
                anomalous: true,
                mask: Some(mask),
            });
        }
        Ok(out)
    }
}

/// Writes `train/good` and `test/<defect>` with `ground_truth/<defect>/*_mask.png`
/// under `root/<category>`.
pub fn write_mvtec_layout(root: &Path, category: &str, train: &[ImageTensor], test: &[Sample]) -> Result<()> {
    let cat = root.join(category);
    for (i, img) in train.iter().enumerate() {
        write_image(img, &cat.join(format!("train/good/{i:03}.png")))?;
    }
    for s in test {
        let mut parts = s.id.rsplit('/');
        let name = parts.next().unwrap_or("000");
        let defect = if s.anomalous { parts.next().unwrap_or("defect") } else { "good" };
        write_image(&s.image, &cat.join(format!("test/{defect}/{name}.png")))?;
        if s.anomalous {
            let empty = AnomalyMask::zeros(s.image.height(), s.image.width());
            write_mask(
                s.mask.as_ref().unwrap_or(&empty),
                &cat.join(format!("ground_truth/{defect}/{name}_mask.png")),
            )?;
        }
    }
    Ok(())
}
