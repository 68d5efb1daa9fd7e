//! Image scores, ranking metrics and mask overlap.

use std::cmp::Ordering;

use crate::error::{DsrError, Result};
use crate::types::{AnomalyMask, SegmentationMap};

/// Side of the averaging window applied before the global max.
pub const SCORE_WINDOW: usize = 21;

/// `max` of the map smoothed by a 21x21 mean filter. Border windows average
/// only the in-bounds pixels, so a constant map scores its constant at any size.
pub fn image_score(map: &SegmentationMap) -> f64 {
    smoothed_max(map.data(), map.height(), map.width(), SCORE_WINDOW)
}

pub fn smoothed_max(data: &[f32], h: usize, w: usize, window: usize) -> f64 {
    if h == 0 || w == 0 {
        return 0.0;
    }
    let r = window / 2;
    // summed-area table with a zero row and column in front
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += data[y * w + x] as f64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut best = f64::NEG_INFINITY;
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            best = best.max(s / n);
        }
    }
    best
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(DsrError::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DsrError::Metric("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties at midrank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(DsrError::Metric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision over descending unique scores; tied scores
/// enter as one threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(DsrError::Metric("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut group_tp = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                group_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        if group_tp > 0 {
            ap += group_tp as f64 / pos as f64 * tp as f64 / (tp + fp) as f64;
        }
        i = j;
    }
    Ok(ap)
}

/// Scores split by label. Merging is concatenation, so partial results
/// from independent shards combine in any grouping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreAccumulator {
    positives: Vec<f32>,
    negatives: Vec<f32>,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: f32, label: bool) {
        if label {
            self.positives.push(score);
        } else {
            self.negatives.push(score);
        }
    }

    pub fn extend_map(&mut self, map: &SegmentationMap, mask: &AnomalyMask) -> Result<()> {
        if (map.height(), map.width()) != (mask.height(), mask.width()) {
            return Err(DsrError::contract(format!(
                "map {}x{} and mask {}x{} differ in resolution",
                map.height(),
                map.width(),
                mask.height(),
                mask.width()
            )));
        }
        for (&s, &l) in map.data().iter().zip(mask.data()) {
            self.push(s, l != 0);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: ScoreAccumulator) {
        self.positives.extend(other.positives);
        self.negatives.extend(other.negatives);
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positives(&self) -> usize {
        self.positives.len()
    }

    pub fn average_precision(&self) -> Result<f64> {
        if self.positives.is_empty() {
            return Err(DsrError::Metric("average precision needs a positive".into()));
        }
        let mut pos = self.positives.clone();
        let mut neg = self.negatives.clone();
        if pos.iter().chain(&neg).any(|s| s.is_nan()) {
            return Err(DsrError::Metric("scores contain NaN".into()));
        }
        let desc = |a: &f32, b: &f32| b.partial_cmp(a).unwrap_or(Ordering::Equal);
        pos.sort_unstable_by(desc);
        neg.sort_unstable_by(desc);
        // merge the two descending runs threshold by threshold
        let n_pos = pos.len() as f64;
        let (mut i, mut j) = (0, 0);
        let (mut tp, mut ap) = (0usize, 0.0);
        while i < pos.len() || j < neg.len() {
            let t = match (pos.get(i), neg.get(j)) {
                (Some(&p), Some(&n)) => p.max(n),
                (Some(&p), None) => p,
                (None, Some(&n)) => n,
                (None, None) => unreachable!(),
            };
            let start = i;
            while i < pos.len() && pos[i] == t {
                i += 1;
            }
            while j < neg.len() && neg[j] == t {
                j += 1;
            }
            let fp = j;
            let g = i - start;
            tp += g;
            if g > 0 {
                ap += g as f64 / n_pos * tp as f64 / (tp + fp) as f64;
            }
        }
        Ok(ap)
    }
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(a: &AnomalyMask, b: &AnomalyMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(DsrError::contract("IoU operands differ in size"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
