use crate::boxes::BBox;
use crate::dataset::Annotation;

use super::geometry::{Level, PyramidGeometry};

/// Label of pixels excluded from every loss term.
pub const IGNORE: i32 = -1;

/// Dense targets of one level of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub height: usize,
    pub width: usize,
    /// `0..C` positive, `C` background, [`IGNORE`] ignorable.
    pub labels: Vec<i32>,
    /// `[4, h, w]` (l, t, r, b) in stride units; zero off the positives.
    pub dist: Vec<f64>,
    /// `[h, w]`; zero off the positives.
    pub centerness: Vec<f64>,
}

impl LevelTargets {
    pub fn background(height: usize, width: usize, num_classes: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            labels: vec![num_classes as i32; n],
            dist: vec![0.0; 4 * n],
            centerness: vec![0.0; n],
        }
    }
}

/// Dense targets of one image across all pyramid levels.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargets {
    pub num_classes: usize,
    pub levels: Vec<LevelTargets>,
}

impl DenseTargets {
    pub fn background(geometry: &PyramidGeometry, num_classes: usize) -> Self {
        Self {
            num_classes,
            levels: geometry
                .levels
                .iter()
                .map(|l| LevelTargets::background(l.height, l.width, num_classes))
                .collect(),
        }
    }

    pub fn num_positive(&self) -> usize {
        let c = self.num_classes as i32;
        self.levels
            .iter()
            .flat_map(|l| &l.labels)
            .filter(|&&v| (0..c).contains(&v))
            .count()
    }

    pub fn num_ignored(&self) -> usize {
        self.levels.iter().flat_map(|l| &l.labels).filter(|&&v| v == IGNORE).count()
    }
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`.
pub fn centerness(l: f64, t: f64, r: f64, b: f64) -> f64 {
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Distances from a point to the sides of `bbox`, in pixels.
pub fn ltrb(bbox: &BBox, x: f64, y: f64) -> [f64; 4] {
    [x - bbox.x1, y - bbox.y1, bbox.x2 - x, bbox.y2 - y]
}

/// Index of the box a pixel center is assigned to at `level`, if any:
/// the smallest-area box that strictly contains the center and whose
/// largest side distance falls in the level's range; ties go to the lower index.
pub fn assigned_box(boxes: &[BBox], level: &Level, x: f64, y: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        if !b.contains_strict(x, y) {
            continue;
        }
        let m = ltrb(b, x, y).into_iter().fold(0.0, f64::max);
        if m < level.range.0 || m >= level.range.1 {
            continue;
        }
        let area = b.area();
        if best.map_or(true, |(_, a)| area < a) {
            best = Some((i, area));
        }
    }
    best.map(|(i, _)| i)
}

/// Writes the regression and label targets of `ann` at flat pixel `p`.
pub(crate) fn write_positive(t: &mut LevelTargets, level: &Level, p: usize, ann: &Annotation) {
    let (row, col) = (p / level.width, p % level.width);
    let (x, y) = level.center(row, col);
    let d = ltrb(&ann.bbox, x, y);
    let n = level.len();
    let s = level.stride as f64;
    t.labels[p] = ann.category as i32;
    for (c, v) in d.iter().enumerate() {
        t.dist[c * n + p] = v / s;
    }
    t.centerness[p] = centerness(d[0], d[1], d[2], d[3]);
}

/// Dense per-level targets for labeled annotations.
pub fn assign_targets(annotations: &[Annotation], geometry: &PyramidGeometry, num_classes: usize) -> DenseTargets {
    let boxes: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
    let mut out = DenseTargets::background(geometry, num_classes);
    for (level, t) in geometry.levels.iter().zip(&mut out.levels) {
        for p in 0..level.len() {
            let (x, y) = level.center(p / level.width, p % level.width);
            if let Some(i) = assigned_box(&boxes, level, x, y) {
                write_positive(t, level, p, &annotations[i]);
            }
        }
    }
    out
}
