//! Weak and strong augmentation, patch shuffling, and the exact geometric
//! records that let dense targets follow the image.

use dsl_autodiff::ops::resize_down_tensor;
use dsl_autodiff::{Real, ResizeMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::detector::{DenseTargets, PyramidGeometry};
use crate::error::{config_err, Result};

/// Value written into cutout holes.
pub const CUTOUT_FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutMode {
    /// Split into left and right parts at a column and swap them.
    Horizontal,
    /// Split into top and bottom parts at a row and swap them.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCut {
    pub mode: CutMode,
    /// Column or row of the split, in pixels. 0 and the full extent are identity cuts.
    pub position: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Everything an augmentation did. Geometric ops apply in field order:
/// the flip first, then each cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub cutouts: Vec<Rect>,
    pub cuts: Vec<PatchCut>,
    pub downsample: usize,
}

impl Default for AugRecord {
    fn default() -> Self {
        Self {
            flip: false,
            jitter: None,
            cutouts: Vec::new(),
            cuts: Vec::new(),
            downsample: 1,
        }
    }
}

impl AugRecord {
    /// Single-line JSON form used in training logs.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("serializable record")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| config_err(format!("bad augmentation record: {e}")))
    }

    pub fn is_identity_geometry(&self) -> bool {
        !self.flip && self.cuts.is_empty()
    }
}

fn dims3<T: Real>(image: &Tensor<T>) -> (usize, usize, usize) {
    match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => panic!("expected a [C, H, W] image, got {s:?}"),
    }
}

fn remap<T: Real>(image: &Tensor<T>, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<T> {
    let (c, h, w) = dims3(image);
    let d = image.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                out.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::from_vec(image.shape(), out).expect("same shape")
}

pub fn flip_image<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let (_, _, w) = dims3(image);
    remap(image, |y, x| (y, w - 1 - x))
}

pub fn flip_annotations(annotations: &[Annotation], width: f64) -> Vec<Annotation> {
    annotations
        .iter()
        .map(|a| Annotation {
            category: a.category,
            bbox: a.bbox.flip_horizontal(width),
        })
        .collect()
}

/// Rolls the image so the part after `cut.position` comes first.
pub fn apply_cut<T: Real>(image: &Tensor<T>, cut: PatchCut) -> Tensor<T> {
    let (_, h, w) = dims3(image);
    match cut.mode {
        CutMode::Horizontal => remap(image, |y, x| (y, (x + cut.position) % w)),
        CutMode::Vertical => remap(image, |y, x| ((y + cut.position) % h, x)),
    }
}

/// Random horizontal flip with probability `flip_prob`.
pub fn weak_augment<T: Real>(
    image: &Tensor<T>,
    annotations: &[Annotation],
    seed: u64,
    flip_prob: f64,
) -> (Tensor<T>, Vec<Annotation>, AugRecord) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(flip_prob.clamp(0.0, 1.0));
    let record = AugRecord {
        flip,
        ..Default::default()
    };
    if flip {
        let (_, _, w) = dims3(image);
        (flip_image(image), flip_annotations(annotations, w as f64), record)
    } else {
        (image.clone(), annotations.to_vec(), record)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongAugConfig {
    pub flip_prob: f64,
    /// Maximum relative change of brightness, contrast and saturation.
    pub jitter: f64,
    pub max_cutouts: usize,
    /// Largest hole side as a fraction of the image side.
    pub cutout_max_frac: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter: 0.4,
            max_cutouts: 2,
            cutout_max_frac: 0.25,
        }
    }
}

fn apply_jitter<T: Real>(image: &mut Tensor<T>, j: &Jitter) {
    let (c, h, w) = dims3(image);
    let n = h * w;
    let d = image.data_mut();
    for v in d.iter_mut() {
        *v = T::from_f64(v.as_f64() * j.brightness);
    }
    let mean = d.iter().map(|v| v.as_f64()).sum::<f64>() / d.len().max(1) as f64;
    for v in d.iter_mut() {
        *v = T::from_f64((v.as_f64() - mean) * j.contrast + mean);
    }
    for p in 0..n {
        let gray = (0..c).map(|ch| d[ch * n + p].as_f64()).sum::<f64>() / c as f64;
        for ch in 0..c {
            let v = d[ch * n + p].as_f64();
            d[ch * n + p] = T::from_f64(gray + (v - gray) * j.saturation);
        }
    }
}

/// Flip, color jitter and cutout. Only the flip moves pixels.
pub fn strong_augment<T: Real>(image: &Tensor<T>, seed: u64, cfg: &StrongAugConfig) -> (Tensor<T>, AugRecord) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, h, w) = dims3(image);
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let mut out = if flip { flip_image(image) } else { image.clone() };

    let jitter = (cfg.jitter > 0.0).then(|| {
        let mut f = || 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter);
        Jitter {
            brightness: f(),
            contrast: f(),
            saturation: f(),
        }
    });
    if let Some(j) = &jitter {
        apply_jitter(&mut out, j);
    }

    let mut cutouts = Vec::new();
    let max_w = ((w as f64 * cfg.cutout_max_frac) as usize).min(w);
    let max_h = ((h as f64 * cfg.cutout_max_frac) as usize).min(h);
    if cfg.max_cutouts > 0 && max_w > 0 && max_h > 0 {
        for _ in 0..rng.gen_range(0..=cfg.max_cutouts) {
            let (cw, ch) = (rng.gen_range(1..=max_w), rng.gen_range(1..=max_h));
            cutouts.push(Rect {
                x: rng.gen_range(0..=w - cw),
                y: rng.gen_range(0..=h - ch),
                w: cw,
                h: ch,
            });
        }
    }
    fill_cutouts(&mut out, &cutouts);
    for v in out.data_mut() {
        *v = T::from_f64(v.as_f64().clamp(0.0, 1.0));
    }
    let record = AugRecord {
        flip,
        jitter,
        cutouts,
        ..Default::default()
    };
    (out, record)
}

pub fn fill_cutouts<T: Real>(image: &mut Tensor<T>, holes: &[Rect]) {
    let (c, h, w) = dims3(image);
    let fill = T::from_f64(CUTOUT_FILL);
    let d = image.data_mut();
    for r in holes {
        for ch in 0..c {
            for y in r.y..(r.y + r.h).min(h) {
                for x in r.x..(r.x + r.w).min(w) {
                    d[(ch * h + y) * w + x] = fill;
                }
            }
        }
    }
}

/// `j` rounds of: pick a mode, draw a relative position in [0, 1], snap it
/// to a multiple of `stride`, and swap the two parts.
pub fn patch_shuffle<T: Real>(image: &Tensor<T>, seed: u64, j: usize, stride: usize) -> (Tensor<T>, AugRecord) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, h, w) = dims3(image);
    let mut out = image.clone();
    let mut cuts = Vec::with_capacity(j);
    for _ in 0..j {
        let mode = if rng.gen_bool(0.5) {
            CutMode::Horizontal
        } else {
            CutMode::Vertical
        };
        let extent = if mode == CutMode::Horizontal { w } else { h };
        let s: f64 = rng.gen_range(0.0..=1.0);
        let cells = extent / stride;
        let position = ((s * cells as f64).round() as usize).min(cells) * stride;
        let cut = PatchCut { mode, position };
        if position != 0 && position != extent {
            out = apply_cut(&out, cut);
        }
        cuts.push(cut);
    }
    let record = AugRecord {
        cuts,
        ..Default::default()
    };
    (out, record)
}

/// Index map of one pyramid level: `src[dst]` is the pre-augmentation pixel
/// that lands on `dst`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub src: Vec<usize>,
    /// Horizontal flips exchange the left and right distances.
    pub swap_lr: bool,
}

impl GridMap {
    pub fn inverse(&self) -> GridMap {
        let mut src = vec![0; self.src.len()];
        for (dst, &s) in self.src.iter().enumerate() {
            src[s] = dst;
        }
        GridMap {
            src,
            swap_lr: self.swap_lr,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.swap_lr && self.src.iter().enumerate().all(|(i, &s)| i == s)
    }
}

/// Per-level pixel maps equivalent to the geometric part of `record`.
pub fn apply_record_to_grid(record: &AugRecord, geometry: &PyramidGeometry) -> Result<Vec<GridMap>> {
    geometry
        .levels
        .iter()
        .map(|level| {
            let (h, w, s) = (level.height, level.width, level.stride);
            let mut src: Vec<usize> = (0..h * w).collect();
            // Each op maps a destination pixel to its source in the previous image.
            let mut compose = |op: &dyn Fn(usize, usize) -> (usize, usize)| {
                src = (0..h * w)
                    .map(|p| {
                        let (y, x) = op(p / w, p % w);
                        src[y * w + x]
                    })
                    .collect();
            };
            if record.flip {
                compose(&|y, x| (y, w - 1 - x));
            }
            for cut in &record.cuts {
                if cut.position % s != 0 {
                    return Err(config_err(format!(
                        "cut at {} is not a multiple of stride {s}",
                        cut.position
                    )));
                }
                let k = cut.position / s;
                match cut.mode {
                    CutMode::Horizontal => compose(&|y, x| (y, (x + k) % w)),
                    CutMode::Vertical => compose(&|y, x| ((y + k) % h, x)),
                }
            }
            Ok(GridMap {
                src,
                swap_lr: record.flip,
            })
        })
        .collect()
}

/// Moves dense targets along with the image.
pub fn permute_targets(targets: &DenseTargets, maps: &[GridMap]) -> Result<DenseTargets> {
    if maps.len() != targets.levels.len() {
        return Err(config_err(format!("{} grid maps for {} levels", maps.len(), targets.levels.len())));
    }
    let mut out = targets.clone();
    for ((lt, map), src_t) in out.levels.iter_mut().zip(maps).zip(&targets.levels) {
        let n = lt.labels.len();
        if map.src.len() != n {
            return Err(config_err(format!("grid map of {} pixels for a level of {n}", map.src.len())));
        }
        for (dst, &src) in map.src.iter().enumerate() {
            lt.labels[dst] = src_t.labels[src];
            lt.centerness[dst] = src_t.centerness[src];
            for ch in 0..4 {
                let from = if map.swap_lr { [2, 1, 0, 3][ch] } else { ch };
                lt.dist[ch * n + dst] = src_t.dist[from * n + src];
            }
        }
    }
    Ok(out)
}

/// Bilinear `r`-fold downsample of a `[C, H, W]` or `[N, C, H, W]` image.
pub fn make_scale_pair<T: Real>(image_sp: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    match *image_sp.shape() {
        [c, h, w] => {
            let batched = image_sp.reshape(&[1, c, h, w])?;
            let d = resize_down_tensor(&batched, r, ResizeMode::Bilinear)?;
            let s = d.shape().to_vec();
            Ok(d.reshape(&s[1..])?)
        }
        _ => Ok(resize_down_tensor(image_sp, r, ResizeMode::Bilinear)?),
    }
}
