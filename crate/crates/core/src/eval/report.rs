use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, PixelPooling};
use crate::data::{write_gray, write_image, write_rgb, Sample};
use crate::error::{DsrError, Result};
use crate::eval::metrics::{auroc, average_precision, image_score, ScoreAccumulator};
use crate::nets::{resize_bilinear, DsrModel};
use crate::types::{stack_images, AnomalyMask, ImageTensor, MapResolution, SegmentationMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub category: String,
    pub score: f64,
    pub label: u8,
}

/// Per-image scores and the aggregate detection and localization figures.
/// A figure is `None` when the test set cannot define it; `notes` says why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub auroc_det: Option<f64>,
    pub ap_det: Option<f64>,
    pub ap_loc: Option<f64>,
    pub pixel_pooling: PixelPooling,
    /// `refined` for the upsampling module's map, `bilinear` for upsampled `M`.
    pub pixel_map: String,
    pub pixels: usize,
    pub anomalous_pixels: usize,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DsrError::Config(e.to_string()))
    }

    /// Image AUROC per category, for multi-category test sets.
    pub fn category_auroc(&self) -> Vec<(String, Option<f64>)> {
        let mut cats: Vec<&str> = self.per_image.iter().map(|s| s.category.as_str()).collect();
        cats.sort_unstable();
        cats.dedup();
        cats.into_iter()
            .map(|c| {
                let (s, l): (Vec<f64>, Vec<bool>) = self
                    .per_image
                    .iter()
                    .filter(|p| p.category == c)
                    .map(|p| (p.score, p.label != 0))
                    .unzip();
                (c.to_string(), auroc(&s, &l).ok())
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        let n_anom = self.per_image.iter().filter(|p| p.label != 0).count();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "images {} ({} anomalous), pixels {} ({} anomalous), pixel map {}",
            self.per_image.len(),
            n_anom,
            self.pixels,
            self.anomalous_pixels,
            self.pixel_map
        );
        let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9}", "", "AUROC", "AP_det", "AP_loc");
        let cats = self.category_auroc();
        if cats.len() > 1 {
            for (c, a) in &cats {
                let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9}", c, fmt(*a), "", "");
            }
        }
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>9} {:>9}",
            "all",
            fmt(self.auroc_det),
            fmt(self.ap_det),
            fmt(self.ap_loc)
        );
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| DsrError::io(dir, e))?;
        let json = dir.join("report.json");
        let txt = dir.join("report.txt");
        std::fs::write(&json, self.to_json()?).map_err(|e| DsrError::io(&json, e))?;
        std::fs::write(&txt, self.table()).map_err(|e| DsrError::io(&txt, e))?;
        Ok((json, txt))
    }
}

/// Streaming reducer behind [`evaluate_dataset`]; shards can be merged.
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    per_image: Vec<ImageScore>,
    pixels: ScoreAccumulator,
    per_image_ap: Vec<f64>,
    missing_masks: Vec<String>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `m` is the mask-level map scored for detection, `pixel_map` the
    /// input-resolution map scored against `mask`. Normal images without a
    /// mask count as all-normal pixels.
    pub fn add(
        &mut self,
        id: &str,
        category: &str,
        anomalous: bool,
        m: &SegmentationMap,
        pixel_map: &SegmentationMap,
        mask: Option<&AnomalyMask>,
    ) -> Result<()> {
        self.per_image.push(ImageScore {
            id: id.to_string(),
            category: category.to_string(),
            score: image_score(m),
            label: u8::from(anomalous),
        });
        let empty;
        let mask = match mask {
            Some(m) => m,
            None if anomalous => {
                self.missing_masks.push(id.to_string());
                return Ok(());
            }
            None => {
                empty = AnomalyMask::zeros(pixel_map.height(), pixel_map.width());
                &empty
            }
        };
        if mask.count() > 0 {
            let mut own = ScoreAccumulator::new();
            own.extend_map(pixel_map, mask)?;
            self.per_image_ap.push(own.average_precision()?);
            self.pixels.merge(own);
        } else {
            self.pixels.extend_map(pixel_map, mask)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.per_image.extend(other.per_image);
        self.pixels.merge(other.pixels);
        self.per_image_ap.extend(other.per_image_ap);
        self.missing_masks.extend(other.missing_masks);
    }

    pub fn finish(self, pooling: PixelPooling, pixel_map: &str, pixel_metrics: bool) -> Result<EvalReport> {
        if pixel_metrics && !self.missing_masks.is_empty() {
            return Err(DsrError::Dataset(
                self.missing_masks
                    .iter()
                    .map(|id| format!("anomalous image {id} has no ground-truth mask"))
                    .collect(),
            ));
        }
        let mut notes = Vec::new();
        let (scores, labels): (Vec<f64>, Vec<bool>) =
            self.per_image.iter().map(|p| (p.score, p.label != 0)).unzip();
        let mut keep = |r: Result<f64>, what: &str| match r {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("{what} unavailable: {e}"));
                None
            }
        };
        let auroc_det = keep(auroc(&scores, &labels), "AUROC");
        let ap_det = keep(average_precision(&scores, &labels), "AP_det");
        let ap_loc = if !pixel_metrics {
            None
        } else {
            match pooling {
                PixelPooling::Dataset => keep(self.pixels.average_precision(), "AP_loc"),
                PixelPooling::PerImage if self.per_image_ap.is_empty() => keep(
                    Err(DsrError::Metric("no image has anomalous pixels".into())),
                    "AP_loc",
                ),
                PixelPooling::PerImage => {
                    Some(self.per_image_ap.iter().sum::<f64>() / self.per_image_ap.len() as f64)
                }
            }
        };
        Ok(EvalReport {
            per_image: self.per_image,
            auroc_det,
            ap_det,
            ap_loc,
            pixel_pooling: pooling,
            pixel_map: pixel_map.to_string(),
            pixels: self.pixels.len(),
            anomalous_pixels: self.pixels.positives(),
            notes,
        })
    }
}

/// Image-level figures from the score of `M`; pixel AP over `M_r`, or over
/// bilinearly upsampled `M` when `no_upsampler` is set.
pub fn evaluate_dataset(model: &DsrModel, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(DsrError::Dataset(vec!["test set is empty".into()]));
    }
    let mut acc = EvalAccumulator::new();
    for chunk in samples.chunks(8) {
        let refs: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
        let (m, pix) = infer_maps(model, &refs, cfg.no_upsampler)?;
        for ((s, m), p) in chunk.iter().zip(&m).zip(&pix) {
            acc.add(&s.id, &s.category, s.anomalous, m, p, s.mask.as_ref())?;
        }
    }
    let source = if cfg.no_upsampler { "bilinear" } else { "refined" };
    acc.finish(cfg.pixel_pooling, source, cfg.pixel_metrics)
}

/// `(M, pixel map)` per image; the pixel map is `M_r` or bilinear `M`.
pub fn infer_maps(
    model: &DsrModel,
    images: &[&ImageTensor],
    no_upsampler: bool,
) -> Result<(Vec<SegmentationMap>, Vec<SegmentationMap>)> {
    let x = stack_images(images, model.device())?;
    let (_, _, h, w) = x.dims4()?;
    let out = model.infer(&x)?;
    let full = if no_upsampler {
        resize_bilinear(&out.mask, h, w)?
    } else {
        out.refined
    };
    Ok((
        SegmentationMap::from_batch(&out.mask, MapResolution::Feature)?,
        SegmentationMap::from_batch(&full, MapResolution::Full)?,
    ))
}

/// Writes `<stem>_input.png`, `<stem>_heatmap.png` and `<stem>_overlay.png`;
/// the overlay tints pixels whose score reaches `threshold`.
pub fn emit_overlays(
    image: &ImageTensor,
    map: &SegmentationMap,
    threshold: f32,
    out_dir: &Path,
    stem: &str,
) -> Result<[PathBuf; 3]> {
    let (h, w) = (image.height(), image.width());
    if (map.height(), map.width()) != (h, w) {
        return Err(DsrError::contract(format!(
            "overlay map {}x{} does not match image {h}x{w}",
            map.height(),
            map.width()
        )));
    }
    let input = out_dir.join(format!("{stem}_input.png"));
    let heat = out_dir.join(format!("{stem}_heatmap.png"));
    let over = out_dir.join(format!("{stem}_overlay.png"));
    write_image(image, &input)?;
    write_rgb(&heatmap(map), &heat)?;
    let mut tinted = crate::data::tensor_to_rgb(image);
    for (x, y, p) in tinted.enumerate_pixels_mut() {
        if map.get(y as usize, x as usize) >= threshold {
            p.0 = [
                ((p.0[0] as u16 + 255) / 2) as u8,
                p.0[1] / 2,
                p.0[2] / 2,
            ];
        }
    }
    write_rgb(&tinted, &over)?;
    Ok([input, heat, over])
}

/// Blue-to-red colour ramp of a `[0, 1]` map.
pub fn heatmap(map: &SegmentationMap) -> image::RgbImage {
    let ramp = |v: f32, c: f32| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    image::RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = map.get(y as usize, x as usize).clamp(0.0, 1.0);
        image::Rgb([ramp(v, 3.0), ramp(v, 2.0), ramp(v, 1.0)])
    })
}

/// Grayscale dump of a map, for debugging.
pub fn write_map(map: &SegmentationMap, path: &Path) -> Result<()> {
    write_gray(map.data(), map.height(), map.width(), path)
}
