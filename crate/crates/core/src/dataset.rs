//! Synthetic shapes scenes, labeled/unlabeled splits and annotation files.
//!
//! Scenes contain discs, squares and triangles on a textured, noisy
//! background. Pixel values are quantized to multiples of 1/255 so an 8-bit
//! PPM round trip is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dsl_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::boxes::{overlap_of_smaller, BBox};
use crate::error::{config_err, io_err, CoreError, Result};

pub const CATEGORY_NAMES: [&str; 3] = ["disc", "square", "triangle"];

/// One ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub size_range: (usize, usize),
    /// Relative sampling frequency of each category.
    pub category_weights: Vec<f64>,
    /// Per-object multiplicative color jitter.
    pub color_jitter: f64,
    pub texture_strength: f64,
    pub noise_std: f64,
    /// Largest intersection between two placed boxes, as a fraction of the
    /// smaller one. Bounds how much of an object later shapes can hide.
    pub max_overlap: f64,
    /// Image side must be a multiple of this (the coarsest pyramid stride).
    pub coarsest_stride: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            objects: (0, 6),
            size_range: (12, 72),
            category_weights: vec![0.6, 0.3, 0.1],
            color_jitter: 0.15,
            texture_strength: 0.12,
            noise_std: 0.04,
            max_overlap: 0.3,
            coarsest_stride: 16,
        }
    }
}

impl SceneConfig {
    pub fn num_categories(&self) -> usize {
        self.category_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.coarsest_stride == 0 || self.image_size % self.coarsest_stride != 0 {
            return Err(config_err(format!(
                "image size {} must be a positive multiple of the coarsest stride {}",
                self.image_size, self.coarsest_stride
            )));
        }
        if self.objects.0 > self.objects.1 {
            return Err(config_err("objects range is empty"));
        }
        let (lo, hi) = self.size_range;
        if lo < 2 || lo > hi || hi > self.image_size {
            return Err(config_err(format!("size range {lo}..{hi} invalid for image {}", self.image_size)));
        }
        if self.category_weights.len() != CATEGORY_NAMES.len() {
            return Err(config_err(format!(
                "expected {} category weights, got {}",
                CATEGORY_NAMES.len(),
                self.category_weights.len()
            )));
        }
        if self.category_weights.iter().any(|&w| !(w >= 0.0)) || self.category_weights.iter().sum::<f64>() <= 0.0 {
            return Err(config_err("category weights must be non-negative with a positive sum"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotations: Vec<Annotation>,
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn shape_mask(category: usize, x0: usize, y0: usize, side: usize, px: usize, py: usize) -> bool {
    let s = side as f64;
    let (fx, fy) = (px as f64 + 0.5 - x0 as f64, py as f64 + 0.5 - y0 as f64);
    if fx < 0.0 || fy < 0.0 || fx > s || fy > s {
        return false;
    }
    match category {
        0 => {
            let r = s / 2.0;
            (fx - r).powi(2) + (fy - r).powi(2) <= r * r
        }
        1 => true,
        _ => {
            // Upright isoceles triangle: apex at top center, base along the bottom.
            let half_width = 0.5 * s * (fy / s);
            (fx - s / 2.0).abs() <= half_width
        }
    }
}

/// Renders a deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let categories = WeightedIndex::new(&cfg.category_weights).expect("validated weights");

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.02..0.15);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.3..1.0) * cfg.texture_strength;
            let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            (angle.cos() * freq, angle.sin() * freq, phase, amp, tint)
        })
        .collect();
    let mut canvas = vec![0.0f64; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let mut v = base[c];
                for (kx, ky, ph, amp, tint) in &waves {
                    v += amp * tint[c] * (kx * x as f64 + ky * y as f64 + ph).sin();
                }
                canvas[(c * n + y) * n + x] = v;
            }
        }
    }

    let count = rng.gen_range(cfg.objects.0..=cfg.objects.1);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let category = categories.sample(&mut rng);
        let mut placed = None;
        for _attempt in 0..20 {
            let side = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
            let x0 = rng.gen_range(0..=n - side);
            let y0 = rng.gen_range(0..=n - side);
            let candidate = BBox::new(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64);
            if annotations.iter().all(|a| overlap_of_smaller(&a.bbox, &candidate) <= cfg.max_overlap) {
                placed = Some((x0, y0, side));
                break;
            }
        }
        let Some((x0, y0, side)) = placed else {
            continue;
        };
        let color: [f64; 3] = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let contrast: f64 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
            if contrast >= 0.45 {
                break c;
            }
        };
        let jitter = 1.0 + rng.gen_range(-cfg.color_jitter..=cfg.color_jitter);
        let (mut bx1, mut by1, mut bx2, mut by2) = (usize::MAX, usize::MAX, 0, 0);
        for py in y0..y0 + side {
            for px in x0..x0 + side {
                if shape_mask(category, x0, y0, side, px, py) {
                    for c in 0..3 {
                        canvas[(c * n + py) * n + px] = color[c] * jitter;
                    }
                    bx1 = bx1.min(px);
                    by1 = by1.min(py);
                    bx2 = bx2.max(px + 1);
                    by2 = by2.max(py + 1);
                }
            }
        }
        if bx1 < bx2 && by1 < by2 {
            annotations.push(Annotation {
                category,
                bbox: BBox::new(bx1 as f64, by1 as f64, bx2 as f64, by2 as f64),
            });
        }
    }

    let data: Vec<f32> = canvas
        .into_iter()
        .map(|v| quantize(v + noise.sample(&mut rng)))
        .collect();
    Scene {
        image: Tensor::from_vec(&[3, n, n], data).expect("canvas size"),
        annotations,
    }
}

/// Random labeled/unlabeled partition of `0..n`. Both index lists are sorted.
pub fn split_dataset(n: usize, labeled_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(config_err(format!("labeled fraction {labeled_fraction} outside (0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * labeled_fraction).round() as usize;
    let mut labeled = idx[..k.min(n)].to_vec();
    let mut unlabeled = idx[k.min(n)..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

/// One image entry of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub file: String,
}

/// Images with their annotations, in file order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    /// `annotations[i]` belongs to `images[i]`.
    pub annotations: Vec<Vec<Annotation>>,
    pub categories: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<ImageRecord>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    image_id: usize,
    category_id: usize,
    /// `[x, y, w, h]`
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

pub fn save_annotations(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CocoFile {
        images: dataset.images.clone(),
        annotations: dataset
            .images
            .iter()
            .zip(&dataset.annotations)
            .flat_map(|(img, anns)| {
                anns.iter().map(move |a| CocoAnnotation {
                    image_id: img.id,
                    category_id: a.category,
                    bbox: [a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()],
                })
            })
            .collect(),
        categories: dataset
            .categories
            .iter()
            .enumerate()
            .map(|(id, name)| CocoCategory { id, name: name.clone() })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("serializable");
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_annotations(&text).map_err(|e| match e {
        CoreError::Parse { message, .. } => CoreError::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Parses annotation text; an empty document is an empty dataset.
pub fn parse_annotations(text: &str) -> Result<Dataset> {
    if text.trim().is_empty() {
        return Ok(Dataset::default());
    }
    let file: CocoFile = serde_json::from_str(text).map_err(|e| CoreError::Parse {
        path: PathBuf::from("<annotations>"),
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    let mut categories = vec![String::new(); file.categories.len()];
    for (i, c) in file.categories.iter().enumerate() {
        if c.id >= categories.len() {
            return Err(CoreError::Record {
                record: format!("categories[{i}]"),
                message: format!("category id {} is not dense in 0..{}", c.id, categories.len()),
            });
        }
        categories[c.id] = c.name.clone();
    }
    let mut by_id = std::collections::HashMap::new();
    for (i, img) in file.images.iter().enumerate() {
        if by_id.insert(img.id, i).is_some() {
            return Err(CoreError::Record {
                record: format!("images[{i}]"),
                message: format!("duplicate image id {}", img.id),
            });
        }
    }
    let mut annotations = vec![Vec::new(); file.images.len()];
    for (i, a) in file.annotations.iter().enumerate() {
        let record = format!("annotations[{i}]");
        let Some(&img_idx) = by_id.get(&a.image_id) else {
            return Err(CoreError::Record {
                record,
                message: format!("unknown image id {}", a.image_id),
            });
        };
        let [x, y, w, h] = a.bbox;
        let bbox = BBox::new(x, y, x + w, y + h);
        if !bbox.is_valid() {
            return Err(CoreError::Record {
                record,
                message: format!("degenerate box {:?} (need x1 < x2 and y1 < y2)", a.bbox),
            });
        }
        let img = &file.images[img_idx];
        if !bbox.within(img.width as f64, img.height as f64) {
            return Err(CoreError::Record {
                record,
                message: format!("box {:?} outside {}x{} image", a.bbox, img.width, img.height),
            });
        }
        if a.category_id >= categories.len() {
            return Err(CoreError::Record {
                record,
                message: format!("category {} outside 0..{}", a.category_id, categories.len()),
            });
        }
        annotations[img_idx].push(Annotation {
            category: a.category_id,
            bbox,
        });
    }
    Ok(Dataset {
        images: file.images,
        annotations,
        categories,
    })
}

/// Writes a `[3, H, W]` image in `[0, 1]` as binary 8-bit PPM.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let &[3, h, w] = image.shape() else {
        return Err(config_err(format!("PPM needs a [3, H, W] image, got {:?}", image.shape())));
    };
    let mut header = String::new();
    write!(header, "P6\n{w} {h}\n255\n").unwrap();
    let mut bytes = header.into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| CoreError::Parse {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only binary 8-bit PPM (P6, maxval 255) is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = pixels[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// Generates `n` scenes with seeds `base_seed + i` and writes them to `dir`
/// (`annotations.json` plus `images/*.ppm`).
pub fn write_dataset(dir: impl AsRef<Path>, n: usize, base_seed: u64, cfg: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut ds = Dataset {
        categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    for i in 0..n {
        let scene = generate_scene(base_seed + i as u64, cfg);
        let file = format!("images/{i:06}.ppm");
        write_ppm(dir.join(&file), &scene.image)?;
        ds.images.push(ImageRecord {
            id: i,
            width: cfg.image_size,
            height: cfg.image_size,
            file,
        });
        ds.annotations.push(scene.annotations);
    }
    save_annotations(&ds, dir.join("annotations.json"))?;
    Ok(ds)
}

/// Loads every image of an annotation file written by [`write_dataset`].
pub fn load_scenes(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let ds = load_annotations(dir.join("annotations.json"))?;
    ds.images
        .iter()
        .zip(ds.annotations)
        .map(|(img, annotations)| {
            Ok(Scene {
                image: read_ppm(dir.join(&img.file))?,
                annotations,
            })
        })
        .collect()
}
