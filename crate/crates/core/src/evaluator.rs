//! COCO-style average precision.

use crate::boxes::iou;
use crate::dataset::Annotation;
use crate::detector::Detection;

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Interpolated precision at the 101 recall points 0, 0.01, ..., 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub category: usize,
    pub iou_threshold: f64,
    pub precision: Vec<f64>,
}

impl PrCurve {
    pub fn recall_points() -> Vec<f64> {
        (0..=100).map(|i| i as f64 / 100.0).collect()
    }

    pub fn ap(&self) -> f64 {
        self.precision.iter().sum::<f64>() / self.precision.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean over thresholds of the mean over categories that have ground truth.
    pub map: f64,
    pub ap50: f64,
    /// Per category, averaged over thresholds; `None` without ground truth.
    pub per_category: Vec<Option<f64>>,
    pub thresholds: Vec<f64>,
    /// One curve per (category with ground truth, threshold).
    pub curves: Vec<PrCurve>,
}

/// Score-ordered true/false positive flags of `category` at `thr`, with the
/// ground-truth count. Each detection takes the unmatched ground truth of
/// highest IoU at or above `thr`; lower index wins ties.
pub fn match_category(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    category: usize,
    thr: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut flags = Vec::new();
    let mut num_gt = 0;
    for (dets, gts) in detections.iter().zip(ground_truth) {
        let gts: Vec<_> = gts.iter().filter(|g| g.category == category).collect();
        num_gt += gts.len();
        let mut dets: Vec<&Detection> = dets.iter().filter(|d| d.category == category).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= thr && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            flags.push((d.score, best.is_some()));
        }
    }
    // Stable: equal scores keep image order, then within-image order.
    flags.sort_by(|a, b| b.0.total_cmp(&a.0));
    (flags, num_gt)
}

/// 101-point interpolated precision for score-ordered match flags.
pub fn interpolated_precision(flags: &[bool], num_gt: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt.max(1) as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    PrCurve::recall_points()
        .into_iter()
        .map(|r| {
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

pub fn compute_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
    thresholds: &[f64],
) -> EvalResult {
    let mut curves = Vec::new();
    let mut per_cat_sum = vec![0.0; num_classes];
    let mut has_gt = vec![false; num_classes];
    let mut per_thr = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut aps = Vec::new();
        for k in 0..num_classes {
            let (flags, num_gt) = match_category(detections, ground_truth, k, thr);
            if num_gt == 0 {
                continue;
            }
            has_gt[k] = true;
            let flags: Vec<bool> = flags.into_iter().map(|f| f.1).collect();
            let curve = PrCurve {
                category: k,
                iou_threshold: thr,
                precision: interpolated_precision(&flags, num_gt),
            };
            let ap = curve.ap();
            per_cat_sum[k] += ap;
            aps.push(ap);
            curves.push(curve);
        }
        per_thr.push(if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        });
    }
    let map = if per_thr.is_empty() {
        0.0
    } else {
        per_thr.iter().sum::<f64>() / per_thr.len() as f64
    };
    let ap50 = thresholds
        .iter()
        .position(|&t| (t - 0.5).abs() < 1e-9)
        .map_or(0.0, |i| per_thr[i]);
    let per_category = (0..num_classes)
        .map(|k| has_gt[k].then(|| per_cat_sum[k] / thresholds.len() as f64))
        .collect();
    EvalResult {
        map,
        ap50,
        per_category,
        thresholds: thresholds.to_vec(),
        curves,
    }
}
