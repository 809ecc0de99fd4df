//! Three-way partition of teacher detections with class-adaptive thresholds,
//! and dense rendering of the result.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::dataset::Annotation;
use crate::detector::{assigned_box, write_positive, DenseTargets, Detection, PyramidGeometry, IGNORE};
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Foreground,
    Ignorable,
    Background,
}

/// A detection with the region kind it was assigned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub category: usize,
    pub bbox: BBox,
    pub score: f64,
    pub kind: RegionKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdConfig {
    pub tau1: f64,
    pub tau: f64,
    pub beta: f64,
    pub clamp: (f64, f64),
    pub momentum: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            tau1: 0.1,
            tau: 0.35,
            beta: 0.7,
            clamp: (0.25, 0.35),
            momentum: 0.99,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(config_err(format!("threshold clamp [{lo}, {hi}] must lie inside (0, 1)")));
        }
        if !(self.tau1 > 0.0 && self.tau1 < lo) {
            return Err(config_err(format!("tau1 {} must lie in (0, {lo})", self.tau1)));
        }
        if !(self.momentum >= 0.0 && self.momentum <= 1.0) {
            return Err(config_err(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

/// Running per-category score mass of foreground instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub mass: Vec<f64>,
    pub updates: usize,
}

impl CategoryStats {
    /// Unit mass, so the first thresholds equal `tau`.
    pub fn new(num_classes: usize) -> Self {
        Self {
            mass: vec![1.0; num_classes],
            updates: 0,
        }
    }
}

/// `clamp(mass_k^beta * tau)` per category.
pub fn adaptive_thresholds(stats: &CategoryStats, cfg: &ThresholdConfig) -> Vec<f64> {
    stats
        .mass
        .iter()
        .map(|&m| (m.max(0.0).powf(cfg.beta) * cfg.tau).clamp(cfg.clamp.0, cfg.clamp.1))
        .collect()
}

/// Per-category score mass of one batch: sum of foreground scores of the
/// category over the total foreground count.
pub fn batch_mass(foreground: &[Instance], num_classes: usize) -> Option<Vec<f64>> {
    let fg: Vec<&Instance> = foreground.iter().filter(|i| i.kind == RegionKind::Foreground).collect();
    if fg.is_empty() {
        return None;
    }
    let mut mass = vec![0.0; num_classes];
    for i in &fg {
        mass[i.category] += i.score;
    }
    let n = fg.len() as f64;
    Some(mass.into_iter().map(|m| m / n).collect())
}

/// Exponential moving average toward the batch mass; a batch without
/// foreground leaves the statistics untouched.
pub fn update_stats(stats: &CategoryStats, foreground: &[Instance], momentum: f64) -> CategoryStats {
    match batch_mass(foreground, stats.mass.len()) {
        None => stats.clone(),
        Some(batch) => CategoryStats {
            mass: stats
                .mass
                .iter()
                .zip(batch)
                .map(|(&s, b)| momentum * s + (1.0 - momentum) * b)
                .collect(),
            updates: stats.updates + 1,
        },
    }
}

/// Foreground at `p >= tau2[k]`, ignorable for `tau1 < p < tau2[k]`,
/// background at `p <= tau1`.
pub fn partition_instances(detections: &[Detection], tau1: f64, tau2: &[f64]) -> Result<Vec<Instance>> {
    if let Some((k, &t)) = tau2.iter().enumerate().find(|(_, &t)| !(tau1 < t)) {
        return Err(config_err(format!("tau1 {tau1} must be below the category {k} threshold {t}")));
    }
    detections
        .iter()
        .map(|d| {
            let t2 = *tau2
                .get(d.category)
                .ok_or_else(|| config_err(format!("no threshold for category {}", d.category)))?;
            let kind = if d.score >= t2 {
                RegionKind::Foreground
            } else if d.score > tau1 {
                RegionKind::Ignorable
            } else {
                RegionKind::Background
            };
            Ok(Instance {
                category: d.category,
                bbox: d.bbox,
                score: d.score,
                kind,
            })
        })
        .collect()
}

/// One cut-off: foreground at `p >= t`, background otherwise.
pub fn partition_single(detections: &[Detection], t: f64) -> Vec<Instance> {
    detections
        .iter()
        .map(|d| Instance {
            category: d.category,
            bbox: d.bbox,
            score: d.score,
            kind: if d.score >= t {
                RegionKind::Foreground
            } else {
                RegionKind::Background
            },
        })
        .collect()
}

/// Foreground instances follow labeled-data assignment; pixels whose center
/// lies strictly inside an ignorable box and that no foreground claims are
/// ignored on every level.
pub fn render_pseudo_targets(instances: &[Instance], geometry: &PyramidGeometry, num_classes: usize) -> DenseTargets {
    let fg: Vec<Annotation> = instances
        .iter()
        .filter(|i| i.kind == RegionKind::Foreground)
        .map(|i| Annotation {
            category: i.category,
            bbox: i.bbox,
        })
        .collect();
    let fg_boxes: Vec<BBox> = fg.iter().map(|a| a.bbox).collect();
    let ignorable: Vec<BBox> = instances
        .iter()
        .filter(|i| i.kind == RegionKind::Ignorable)
        .map(|i| i.bbox)
        .collect();
    let mut out = DenseTargets::background(geometry, num_classes);
    for (level, t) in geometry.levels.iter().zip(&mut out.levels) {
        for p in 0..level.len() {
            let (x, y) = level.center(p / level.width, p % level.width);
            if let Some(i) = assigned_box(&fg_boxes, level, x, y) {
                write_positive(t, level, p, &fg[i]);
            } else if ignorable.iter().any(|b| b.contains_strict(x, y)) {
                t.labels[p] = IGNORE;
            }
        }
    }
    out
}
