//! Data, split, checkpoint and prediction files used by the commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dsl_core::dataset::{load_annotations, load_scenes, split_dataset, write_dataset, Annotation, Scene, SceneConfig};
use dsl_core::detector::{DecodeConfig, Detection};
use dsl_core::evaluator::{coco_thresholds, compute_map, EvalResult};
use dsl_core::pseudo_labels::Instance;
use dsl_core::teacher::infer;
use dsl_core::trainer::{load_state, pseudo_label, MetaContext, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};
use crate::run::CONFIG;

pub const ANNOTATIONS: &str = "annotations.json";

/// Writes `n` synthetic scenes with seeds `seed..seed + n` to `dir`.
pub fn gen_data(dir: &Path, n: usize, seed: u64) -> Result<()> {
    write_dataset(dir, n, seed, &SceneConfig::default())?;
    Ok(())
}

pub fn load_data(dir: &Path) -> Result<Vec<Scene>> {
    if !dir.join(ANNOTATIONS).exists() {
        return Err(HarnessError::Data {
            path: dir.to_path_buf(),
            message: format!("no {ANNOTATIONS}"),
        });
    }
    Ok(load_scenes(dir)?)
}

/// Labeled/unlabeled partition of a dataset's image indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub fraction: f64,
    pub seed: u64,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, fraction: f64, seed: u64) -> Result<Self> {
        let (labeled, unlabeled) = split_dataset(n, fraction, seed)?;
        Ok(Self {
            fraction,
            seed,
            labeled,
            unlabeled,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::run::write_text(path, &serde_json::to_string_pretty(self).expect("serializable"))
    }

    /// Reads a split and checks it against a dataset of `n` images.
    pub fn load(path: &Path, n: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let split: Self = serde_json::from_str(&text).map_err(|e| data_err(path, e))?;
        if let Some(&bad) = split.labeled.iter().chain(&split.unlabeled).find(|&&i| i >= n) {
            return Err(data_err(path, format!("index {bad} outside a dataset of {n} images")));
        }
        if split.labeled.is_empty() {
            return Err(data_err(path, "no labeled images"));
        }
        Ok(split)
    }
}

fn data_err(path: &Path, message: impl ToString) -> HarnessError {
    HarnessError::Data {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// A trained model located from a checkpoint or run directory.
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub meta: Option<MetaContext>,
}

/// Accepts a state directory or a run directory (whose `final/` is used).
/// `config.txt` and the embedding network are looked up in the directory
/// and its two nearest ancestors.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let state_dir = if path.join("state.json").exists() {
        path.to_path_buf()
    } else if path.join(crate::run::FINAL).join("state.json").exists() {
        path.join(crate::run::FINAL)
    } else {
        return Err(data_err(path, "not a checkpoint or run directory"));
    };
    let ancestors: Vec<PathBuf> = state_dir.ancestors().take(3).map(Path::to_path_buf).collect();
    let cfg_path = ancestors
        .iter()
        .map(|d| d.join(CONFIG))
        .find(|p| p.exists())
        .ok_or_else(|| data_err(path, format!("no {CONFIG} beside the checkpoint")))?;
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg = TrainConfig::from_text(&text).map_err(|e| data_err(&cfg_path, e))?;
    let meta = match ancestors.iter().find(|d| d.join("metanet").exists()) {
        Some(d) => Some(MetaContext::load(d)?),
        None => None,
    };
    Ok(Checkpoint {
        cfg,
        state: load_state(&state_dir)?,
        meta,
    })
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image: usize,
    pub detections: Vec<Detection>,
}

/// One line of an exported pseudo-label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageLabels {
    pub image: usize,
    pub instances: Vec<Instance>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for line in lines {
        writeln!(file, "{}", serde_json::to_string(line).expect("serializable")).map_err(io_err(path))?;
    }
    file.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| data_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Detections of `ckpt`'s evaluation weights on the chosen images.
pub fn predict(ckpt: &Checkpoint, scenes: &[Scene], indices: &[usize]) -> Result<Vec<ImagePredictions>> {
    let detector = ckpt.cfg.detector();
    let decode = DecodeConfig::default();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(4) {
        let images: Vec<_> = chunk.iter().map(|&i| scenes[i].image.clone()).collect();
        let dets = infer(&detector, ckpt.state.eval_params(), &images, &decode)?;
        out.extend(chunk.iter().zip(dets).map(|(&image, detections)| ImagePredictions { image, detections }));
    }
    Ok(out)
}

/// COCO metrics of `predictions` against the annotations in `data_dir`.
/// Images without a prediction line count as having no detections.
pub fn eval_predictions(data_dir: &Path, predictions: &[ImagePredictions]) -> Result<EvalResult> {
    let path = data_dir.join(ANNOTATIONS);
    let ds = load_annotations(&path)?;
    let mut by_image: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for p in predictions {
        if p.image >= ds.len() {
            return Err(data_err(&path, format!("prediction for image {} outside the dataset", p.image)));
        }
        by_image.entry(p.image).or_default().extend(p.detections.iter().copied());
    }
    let detections: Vec<Vec<Detection>> = (0..ds.len()).map(|i| by_image.remove(&i).unwrap_or_default()).collect();
    let truth: Vec<Vec<Annotation>> = ds.annotations.clone();
    Ok(compute_map(&detections, &truth, ds.categories.len(), &coco_thresholds()))
}

/// Teacher pseudo-labels of the chosen images, partitioned with the
/// checkpoint's statistics.
pub fn export_labels(ckpt: &Checkpoint, scenes: &[Scene], indices: &[usize]) -> Result<Vec<ImageLabels>> {
    let detector = ckpt.cfg.detector();
    let decode = ckpt.cfg.pseudo_decode();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(4) {
        let images: Vec<_> = chunk.iter().map(|&i| scenes[i].image.clone()).collect();
        let dets = infer(&detector, ckpt.state.eval_params(), &images, &decode)?;
        for ((&image, d), img) in chunk.iter().zip(dets).zip(&images) {
            let instances = pseudo_label(&ckpt.cfg, ckpt.meta.as_ref(), &ckpt.state.stats, &d, img)?;
            out.push(ImageLabels { image, instances });
        }
    }
    Ok(out)
}
