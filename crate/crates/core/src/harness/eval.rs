//! COCO-style average precision with 101-point interpolated precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::SyntheticScene;
use crate::error::Result;
use crate::matching::Target;
use crate::model::{Detector, Predictions};
use crate::qa::{box_iou, qa_apply, QaConfig};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over classes and all thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per class, mean over thresholds; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Queries merged away across the evaluated images.
    pub merges: usize,
}

/// One detection per query: the arg-max class scored by its probability.
pub fn detections(pred: &Predictions) -> Vec<Detection> {
    (0..pred.q)
        .map(|i| {
            let row = &pred.probs[i * pred.m..(i + 1) * pred.m];
            let (class, &score) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            let b = &pred.boxes[i * 4..i * 4 + 4];
            Detection {
                class,
                score,
                bbox: [b[0], b[1], b[2], b[3]],
            }
        })
        .collect()
}

/// AP of one class at one IoU threshold.
///
/// Detections are ranked by descending score (ties keep image, then input
/// order); each is matched greedily to the unmatched ground truth of its image
/// with the highest IoU at or above `threshold`. Returns `None` when the class
/// has no ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<Target>], class: usize, threshold: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|t| t.class == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|d| d.class == class).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (k, (img, d)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in gts[*img].iter().enumerate() {
            if t.class != class || taken[*img][j] {
                continue;
            }
            let iou = box_iou(&d.bbox, &t.bbox);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[*img][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // precision envelope, then sample at recall 0, 0.01, …, 1
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// AP report over a set of images with `m` classes. Detections scoring below
/// `min_score` are dropped first.
pub fn ap_report(dets: &[Vec<Detection>], gts: &[Vec<Target>], m: usize, min_score: f64) -> ApReport {
    let kept: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| d.iter().filter(|d| d.score >= min_score).copied().collect())
        .collect();
    let thresholds = coco_thresholds();
    let table: Vec<Vec<Option<f64>>> = (0..m)
        .map(|c| thresholds.iter().map(|&t| average_precision(&kept, gts, c, t)).collect())
        .collect();
    let mean = |vals: Vec<f64>| if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    let at = |k: usize| mean(table.iter().filter_map(|row| row[k]).collect());
    let per_class: Vec<Option<f64>> = table
        .iter()
        .map(|row| row[0].map(|_| mean(row.iter().flatten().copied().collect())))
        .collect();
    ApReport {
        ap: mean(table.iter().flat_map(|row| row.iter().flatten().copied()).collect()),
        ap50: at(0),
        ap75: at(5),
        per_class,
        merges: 0,
    }
}

/// Runs the detector over `scenes` and scores its final-layer predictions.
pub fn evaluate_ap(detector: &Detector, scenes: &[SyntheticScene], qa: &QaConfig) -> Result<ApReport> {
    let per_image: Vec<Result<(Vec<Detection>, usize)>> = scenes
        .par_iter()
        .map(|s| {
            let layers = detector.predict(&s.image)?;
            let last = layers.last().expect("at least one decoder layer");
            if qa.enabled && qa.apply_at_inference {
                let plan = qa_apply(last, qa)?;
                let merges = plan.merges();
                Ok((detections(&plan.merged), merges))
            } else {
                Ok((detections(last), 0))
            }
        })
        .collect();
    let mut dets = Vec::with_capacity(scenes.len());
    let mut merges = 0;
    for r in per_image {
        let (d, k) = r?;
        dets.push(d);
        merges += k;
    }
    let gts: Vec<Vec<Target>> = scenes.iter().map(|s| s.targets.clone()).collect();
    let mut report = ap_report(&dets, &gts, detector.config.m, 0.0);
    report.merges = merges;
    Ok(report)
}
