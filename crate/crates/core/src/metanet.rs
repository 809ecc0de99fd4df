//! Instance embedding network, per-category proxies, and proxy-gated
//! demotion of suspect foreground pseudo-instances.

use std::path::Path;
use std::rc::Rc;

use dsl_autodiff::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::boxes::BBox;
use crate::checkpoint::{load_params, save_params};
use crate::dataset::Annotation;
use crate::detector::{Bound, ParamSet, GN_EPS};
use crate::error::{config_err, CoreError, Result};
use crate::optim::{collect_grads, Sgd};
use crate::pseudo_labels::{Instance, RegionKind};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaNetConfig {
    pub num_classes: usize,
    pub crop_size: usize,
    pub widths: [usize; 3],
    pub embed_dim: usize,
    pub groups: usize,
    /// Logit scale of the cosine classifier used for training.
    pub temperature: f64,
}

impl Default for MetaNetConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            crop_size: 32,
            widths: [16, 32, 32],
            embed_dim: 32,
            groups: 8,
            temperature: 10.0,
        }
    }
}

/// Bilinear resample of the `bbox` region of a `[3, H, W]` image to
/// `[3, size, size]`, sampling at output pixel centers.
pub fn crop_resize<T: Real>(image: &Tensor<T>, bbox: &BBox, size: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(config_err(format!("expected a [C, H, W] image, got {:?}", image.shape())));
    };
    let b = bbox.clip(w as f64, h as f64);
    if !(b.width() > 0.0 && b.height() > 0.0) || size == 0 {
        return Err(CoreError::DegenerateCrop(format!("{bbox:?} inside {w}x{h}")));
    }
    let d = image.data();
    let sample = |ch: usize, y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx].as_f64();
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    };
    let (sx, sy) = (b.width() / size as f64, b.height() / size as f64);
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let (ch, r) = (i / (size * size), i % (size * size));
        let (oy, ox) = (r / size, r % size);
        let y = b.y1 + (oy as f64 + 0.5) * sy - 0.5;
        let x = b.x1 + (ox as f64 + 0.5) * sx - 0.5;
        T::from_f64(sample(ch, y, x))
    }))
}

pub fn init_metanet<T: Real>(cfg: &MetaNetConfig, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize], fan_in: usize| {
        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64(d.sample(&mut rng)))
    };
    let [a, b, c] = cfg.widths;
    let mut p = ParamSet::new();
    p.insert("meta.conv0.w", normal(&[a, 3, 3, 3], 27));
    p.insert("meta.conv1.w", normal(&[b, a, 3, 3], 9 * a));
    p.insert("meta.conv2.w", normal(&[c, b, 3, 3], 9 * b));
    p.insert("meta.proj.w", normal(&[c, cfg.embed_dim], c));
    p.insert("meta.proj.b", Tensor::zeros(&[cfg.embed_dim]));
    p.insert("meta.cls.w", normal(&[cfg.embed_dim, cfg.num_classes], cfg.embed_dim));
    p
}

/// Row-wise L2 normalization of `[n, d]`.
fn normalize_rows<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let norm = x.mul(x)?.sum_axes(&[1])?.add_scalar(T::from_f64(1e-12)).sqrt()?.reshape(&[s[0], 1])?;
    Ok(x.div(norm)?)
}

/// Unit-norm embeddings `[n, D]` of `[n, 3, s, s]` crops.
pub fn embed_batch<'t, T: Real>(cfg: &MetaNetConfig, p: &Bound<'t, T>, crops: Var<'t, T>) -> Result<Var<'t, T>> {
    let g = cfg.groups;
    let mut x = crops;
    for (i, stride) in [(0, 2), (1, 2), (2, 1)] {
        x = x
            .conv2d(p.get(&format!("meta.conv{i}.w"))?, None, stride, 1)?
            .group_norm(g, GN_EPS)?
            .relu();
    }
    let pooled = x.mean_axes(&[2, 3])?;
    let h = pooled.matmul(p.get("meta.proj.w")?)?.add(p.get("meta.proj.b")?)?;
    normalize_rows(h)
}

/// Unit-norm embedding of one crop.
pub fn embed<T: Real>(cfg: &MetaNetConfig, params: &ParamSet<T>, crop: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(embed_many(cfg, params, std::slice::from_ref(crop))?.remove(0))
}

pub fn embed_many<T: Real>(cfg: &MetaNetConfig, params: &ParamSet<T>, crops: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let f = embed_batch(cfg, &bound, tape.constant(Tensor::stack(crops)?))?.value();
    let d = cfg.embed_dim;
    Ok(f.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
}

/// Summed softmax cross-entropy of `[n, C]` logits.
fn softmax_xent_sum<'t, T: Real>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let v = logits.value();
    let c = v.shape()[1];
    let mut probs = vec![0.0f64; v.numel()];
    let mut total = 0.0;
    for (i, row) in v.data().chunks(c).enumerate() {
        let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
        for k in 0..c {
            probs[i * c + k] = (row[k].as_f64() - m).exp() / z;
        }
        total += -(probs[i * c + labels[i]].ln());
    }
    let labels: Rc<Vec<usize>> = Rc::new(labels.to_vec());
    Ok(logits.tape().custom(
        &[logits],
        Tensor::scalar(T::from_f64(total)),
        Box::new(move |ctx| {
            let g = ctx.grad.item().as_f64();
            let gx = Tensor::from_fn(ctx.inputs[0].shape(), |i| {
                let y = if labels[i / c] == i % c { 1.0 } else { 0.0 };
                T::from_f64(g * (probs[i] - y))
            });
            vec![Some(gx)]
        }),
    )?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Relative box jitter applied to training crops.
    pub box_jitter: f64,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 0.05,
            box_jitter: 0.1,
            seed: 0,
        }
    }
}

/// Labeled object of an image, for crop sampling.
pub struct LabeledCrop<'a> {
    pub image: &'a Tensor<f32>,
    pub annotation: Annotation,
}

fn jitter_box(b: &BBox, frac: f64, rng: &mut ChaCha8Rng) -> BBox {
    if frac <= 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| rng.gen_range(-frac..=frac) * s;
    BBox::new(b.x1 + d(w), b.y1 + d(h), b.x2 + d(w), b.y2 + d(h))
}

/// Trains the embedding as a cosine classifier over labeled crops.
pub fn train_metanet(cfg: &MetaNetConfig, train: &MetaTrainConfig, data: &[LabeledCrop<'_>]) -> Result<ParamSet<f32>> {
    missing_categories(data.iter().map(|d| d.annotation.category), cfg.num_classes)?;
    let mut params = init_metanet::<f32>(cfg, train.seed);
    let mut opt = Sgd::new(&params, 0.9, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    for step in 0..train.steps {
        let mut crops = Vec::with_capacity(train.batch);
        let mut labels = Vec::with_capacity(train.batch);
        while crops.len() < train.batch {
            let item = &data[rng.gen_range(0..data.len())];
            let b = jitter_box(&item.annotation.bbox, train.box_jitter, &mut rng);
            let Ok(mut crop) = crop_resize(item.image, &b, cfg.crop_size) else {
                continue;
            };
            if rng.gen_bool(0.5) {
                crop = crate::augment::flip_image(&crop);
            }
            crops.push(crop);
            labels.push(item.annotation.category);
        }
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let f = embed_batch(cfg, &bound, tape.constant(Tensor::stack(&crops)?))?;
        let w = normalize_cols(bound.get("meta.cls.w")?)?;
        let logits = f.matmul(w)?.scale(cfg.temperature as f32);
        let loss = softmax_xent_sum(logits, &labels)?.scale(1.0 / train.batch as f32);
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(CoreError::NonFinite {
                step,
                detail: "embedding classifier loss".into(),
            });
        }
        let grads = collect_grads(&bound, &tape.backward(loss)?);
        let lr = if step < train.steps * 2 / 3 { train.lr } else { train.lr * 0.1 };
        opt.step(&mut params, &grads, lr)?;
        if step % 50 == 0 {
            log::debug!("metanet step {step} loss {value:.4}");
        }
    }
    Ok(params)
}

/// Column-wise L2 normalization of `[d, C]`.
fn normalize_cols<'t, T: Real>(w: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = w.shape();
    let norm = w.mul(w)?.sum_axes(&[0])?.add_scalar(T::from_f64(1e-12)).sqrt()?.reshape(&[1, s[1]])?;
    Ok(w.div(norm)?)
}

fn missing_categories(present: impl Iterator<Item = usize>, num_classes: usize) -> Result<()> {
    let mut seen = vec![false; num_classes];
    for k in present {
        if k < num_classes {
            seen[k] = true;
        }
    }
    let missing: Vec<usize> = (0..num_classes).filter(|&k| !seen[k]).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CoreError::MissingCategories(missing))
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One unit-norm mean feature per category.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyTable {
    pub proxies: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// `m_k = normalize(mean of the unit features of category k)`.
pub fn compute_proxies(features: &[(usize, Vec<f64>)], num_classes: usize) -> Result<ProxyTable> {
    missing_categories(features.iter().map(|f| f.0), num_classes)?;
    let dim = features[0].1.len();
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0; num_classes];
    for (k, f) in features {
        let f = unit(f);
        for (s, v) in sums[*k].iter_mut().zip(&f) {
            *s += v;
        }
        counts[*k] += 1;
    }
    let proxies = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| unit(&s.iter().map(|v| v / n as f64).collect::<Vec<_>>()))
        .collect();
    Ok(ProxyTable { proxies, counts })
}

/// Proxies from the ground-truth objects of labeled images.
pub fn proxies_from_labeled(cfg: &MetaNetConfig, params: &ParamSet<f32>, data: &[LabeledCrop<'_>]) -> Result<ProxyTable> {
    let mut feats = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let crops = chunk
            .iter()
            .map(|d| crop_resize(d.image, &d.annotation.bbox, cfg.crop_size))
            .collect::<Result<Vec<_>>>()?;
        let f = embed_many(cfg, params, &crops)?;
        feats.extend(chunk.iter().map(|d| d.annotation.category).zip(f));
    }
    compute_proxies(&feats, cfg.num_classes)
}

/// Demotes a foreground instance to ignorable when the cosine similarity of
/// its feature to its category proxy is below `d`. `features[i]` is read only
/// for foreground instances.
pub fn refine_with_features(instances: &[Instance], features: &[Option<Vec<f64>>], proxies: &ProxyTable, d: f64) -> Vec<Instance> {
    instances
        .iter()
        .zip(features.iter().chain(std::iter::repeat(&None)))
        .map(|(inst, f)| {
            let mut out = *inst;
            if inst.kind == RegionKind::Foreground {
                if let (Some(f), Some(m)) = (f, proxies.proxies.get(inst.category)) {
                    if cosine(f, m) < d {
                        out.kind = RegionKind::Ignorable;
                    }
                }
            }
            out
        })
        .collect()
}

/// Embeds the foreground instances of `image` and applies [`refine_with_features`].
pub fn refine(
    instances: &[Instance],
    image: &Tensor<f32>,
    cfg: &MetaNetConfig,
    params: &ParamSet<f32>,
    proxies: &ProxyTable,
    d: f64,
) -> Result<Vec<Instance>> {
    let mut crops = Vec::new();
    let mut owners = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.kind == RegionKind::Foreground {
            if let Ok(c) = crop_resize(image, &inst.bbox, cfg.crop_size) {
                crops.push(c);
                owners.push(i);
            }
        }
    }
    let mut features = vec![None; instances.len()];
    for (i, f) in owners.into_iter().zip(embed_many(cfg, params, &crops)?) {
        features[i] = Some(f);
    }
    Ok(refine_with_features(instances, &features, proxies, d))
}

pub fn save_proxies(dir: impl AsRef<Path>, table: &ProxyTable) -> Result<()> {
    let mut p = ParamSet::<f64>::new();
    for (k, m) in table.proxies.iter().enumerate() {
        p.insert(format!("proxy{k}"), Tensor::from_vec(&[m.len()], m.clone())?);
    }
    save_params(dir, &p, "proxies", 0, json!({ "counts": table.counts }))
}

pub fn load_proxies(dir: impl AsRef<Path>) -> Result<ProxyTable> {
    let (p, manifest) = load_params::<f64>(dir)?;
    let counts: Vec<usize> = serde_json::from_value(manifest.extra["counts"].clone())
        .map_err(|e| config_err(format!("proxy manifest counts: {e}")))?;
    let proxies = (0..counts.len())
        .map(|k| Ok(p.get(&format!("proxy{k}"))?.data().to_vec()))
        .collect::<Result<_>>()?;
    Ok(ProxyTable { proxies, counts })
}
