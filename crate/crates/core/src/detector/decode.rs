use dsl_autodiff::{sigmoid, Real};
use serde::{Deserialize, Serialize};

use super::geometry::PyramidGeometry;
use super::model::HeadMaps;
use crate::boxes::{iou, BBox};
use crate::error::{config_err, Result};

/// A scored box produced by the detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    /// Highest-scoring candidates kept before suppression.
    pub pre_nms_top: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.6,
            max_dets: 100,
            pre_nms_top: 1000,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score threshold", self.score_thresh), ("NMS IoU", self.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(config_err(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Sorts by descending score; equal scores keep their input order.
fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Class-wise greedy suppression. Input order breaks score ties.
/// A detection is dropped when its IoU with a kept one of the same
/// category exceeds `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    sort_by_score(&mut dets);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| k.category != d.category || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Scored boxes for one image from its head maps.
pub fn decode<T: Real>(maps: &HeadMaps<T>, geometry: &PyramidGeometry, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (w_img, h_img) = (geometry.image_width as f64, geometry.image_height as f64);
    let mut cands = Vec::new();
    for (lm, level) in maps.levels.iter().zip(&geometry.levels) {
        let n = level.len();
        let c = lm.cls.shape()[0];
        let (cls, ctr, dist) = (lm.cls.data(), lm.ctr.data(), lm.dist.data());
        for p in 0..n {
            let q = sigmoid(ctr[p].as_f64());
            for k in 0..c {
                let score = sigmoid(cls[k * n + p].as_f64()) * q;
                if score <= cfg.score_thresh {
                    continue;
                }
                let (x, y) = level.center(p / level.width, p % level.width);
                let s = level.stride as f64;
                let d = |ch: usize| dist[ch * n + p].as_f64() * s;
                let bbox = BBox::new(x - d(0), y - d(1), x + d(2), y + d(3)).clip(w_img, h_img);
                if bbox.is_valid() {
                    cands.push(Detection { category: k, bbox, score });
                }
            }
        }
    }
    sort_by_score(&mut cands);
    cands.truncate(cfg.pre_nms_top);
    let mut kept = nms(cands, cfg.nms_iou);
    kept.truncate(cfg.max_dets);
    Ok(kept)
}
