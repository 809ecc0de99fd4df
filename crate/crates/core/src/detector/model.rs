use dsl_autodiff::{Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::{PyramidGeometry, DEFAULT_RANGES};
use super::params::{Bound, ParamSet};
use crate::error::{config_err, Result};

pub const GN_EPS: f64 = 1e-5;
/// Prior probability encoded in the initial classification bias.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Channel width of each backbone stage; one pyramid level per stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub neck_channels: usize,
    pub head_convs: usize,
    pub groups: usize,
    /// Carry the recurrent hidden path through each stage.
    pub rla: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            neck_channels: 32,
            head_convs: 2,
            groups: 8,
            rla: true,
        }
    }
}

impl DetectorConfig {
    /// Stem halves the input and every stage halves again.
    pub fn strides(&self) -> Vec<usize> {
        (0..self.widths.len()).map(|i| 1 << (i + 2)).collect()
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<PyramidGeometry> {
        let strides = self.strides();
        if strides.len() > DEFAULT_RANGES.len() {
            return Err(config_err(format!("at most {} stages supported", DEFAULT_RANGES.len())));
        }
        let mut ranges = DEFAULT_RANGES[..strides.len()].to_vec();
        if let Some(last) = ranges.last_mut() {
            last.1 = f64::INFINITY;
        }
        PyramidGeometry::new(height, width, &strides, &ranges)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.widths.is_empty() {
            return Err(config_err("detector needs at least one class and one stage"));
        }
        for &c in self.widths.iter().chain([&self.neck_channels]) {
            if c == 0 || c % self.groups != 0 {
                return Err(config_err(format!("width {c} not divisible by {} groups", self.groups)));
            }
        }
        Ok(())
    }
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(d.sample(rng)))
}

fn kaiming<T: Real>(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor<T> {
    normal(rng, &[cout, cin, k, k], (2.0 / (cin * k * k) as f64).sqrt())
}

/// Deterministic initial parameters for `seed`.
pub fn init_params<T: Real>(cfg: &DetectorConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("stem.conv.w", kaiming(&mut rng, cfg.widths[0], 3, 3));
    let mut cin = cfg.widths[0];
    for (s, &w) in cfg.widths.iter().enumerate() {
        let stage = format!("backbone.stage{s}");
        p.insert(format!("{stage}.down.w"), kaiming(&mut rng, w, cin, 3));
        for b in 0..cfg.blocks_per_stage {
            p.insert(format!("{stage}.block{b}.conv1.w"), kaiming(&mut rng, w, w, 3));
            p.insert(format!("{stage}.block{b}.conv2.w"), kaiming(&mut rng, w, w, 3));
        }
        if cfg.rla {
            p.insert(format!("{stage}.rla.g1.w"), kaiming(&mut rng, w, w, 1));
            p.insert(format!("{stage}.rla.g2.w"), kaiming(&mut rng, w, w, 3));
            p.insert(format!("{stage}.rla.g2.b"), Tensor::zeros(&[w]));
        }
        cin = w;
    }
    let f = cfg.neck_channels;
    for (s, &w) in cfg.widths.iter().enumerate() {
        p.insert(format!("neck.lateral{s}.w"), kaiming(&mut rng, f, w, 1));
        p.insert(format!("neck.lateral{s}.b"), Tensor::zeros(&[f]));
        p.insert(format!("neck.out{s}.w"), kaiming(&mut rng, f, f, 3));
        p.insert(format!("neck.out{s}.b"), Tensor::zeros(&[f]));
    }
    for branch in ["cls", "reg"] {
        for i in 0..cfg.head_convs {
            p.insert(format!("head.{branch}_tower{i}.w"), normal(&mut rng, &[f, f, 3, 3], 0.01));
        }
    }
    let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
    p.insert("head.cls_out.w", normal(&mut rng, &[cfg.num_classes, f, 3, 3], 0.01));
    p.insert("head.cls_out.b", Tensor::full(&[cfg.num_classes], T::from_f64(prior_bias)));
    p.insert("head.dist_out.w", normal(&mut rng, &[4, f, 3, 3], 0.01));
    p.insert("head.dist_out.b", Tensor::zeros(&[4]));
    p.insert("head.ctr_out.w", normal(&mut rng, &[1, f, 3, 3], 0.01));
    p.insert("head.ctr_out.b", Tensor::zeros(&[1]));
    Ok(p)
}

/// Raw outputs of one pyramid level for a batch.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput<'t, T: Real> {
    /// `[n, C, h, w]`
    pub cls: Var<'t, T>,
    /// `[n, 1, h, w]`
    pub ctr: Var<'t, T>,
    /// `[n, 4, h, w]` as (l, t, r, b) in stride units, positive.
    pub dist: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct HeadOutput<'t, T: Real> {
    pub levels: Vec<LevelOutput<'t, T>>,
}

/// Plain per-image head maps (no batch axis).
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMaps<T: Real> {
    pub cls: Tensor<T>,
    pub ctr: Tensor<T>,
    pub dist: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps<T: Real> {
    pub levels: Vec<LevelMaps<T>>,
}

impl<'t, T: Real> HeadOutput<'t, T> {
    pub fn batch_size(&self) -> usize {
        self.levels.first().map_or(0, |l| l.cls.shape()[0])
    }

    /// Images `range` of the batch, still on the tape.
    pub fn narrow(&self, range: std::ops::Range<usize>) -> Result<HeadOutput<'t, T>> {
        let pick = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            let mut shape = v.shape();
            let per: usize = shape[1..].iter().product();
            shape[0] = range.len();
            Ok(v.take((range.start * per..range.end * per).collect(), &shape)?)
        };
        let levels = self
            .levels
            .iter()
            .map(|l| {
                Ok(LevelOutput {
                    cls: pick(l.cls)?,
                    ctr: pick(l.ctr)?,
                    dist: pick(l.dist)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(HeadOutput { levels })
    }

    /// Detached maps of image `n`.
    pub fn maps(&self, n: usize) -> Result<HeadMaps<T>> {
        let levels = self
            .levels
            .iter()
            .map(|l| {
                Ok(LevelMaps {
                    cls: l.cls.value().index_axis0(n)?,
                    ctr: l.ctr.value().index_axis0(n)?,
                    dist: l.dist.value().index_axis0(n)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(HeadMaps { levels })
    }
}

/// Residual function θ: conv3x3, GN, ReLU, conv3x3, GN.
#[derive(Clone, Copy)]
pub struct Residual<'t, T: Real> {
    pub conv1: Var<'t, T>,
    pub conv2: Var<'t, T>,
    pub groups: usize,
}

impl<'t, T: Real> Residual<'t, T> {
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv2d(self.conv1, None, 1, 1)?.group_norm(self.groups, GN_EPS)?.relu();
        Ok(y.conv2d(self.conv2, None, 1, 1)?.group_norm(self.groups, GN_EPS)?)
    }
}

/// Stage-shared hidden path: `g1` is a 1x1 conv, `g2` a 3x3 conv with bias.
#[derive(Clone, Copy)]
pub struct HiddenPath<'t, T: Real> {
    pub g1: Var<'t, T>,
    pub g2_w: Var<'t, T>,
    pub g2_b: Var<'t, T>,
}

/// One recurrent aggregation block:
/// `x' = θ(x + h) + x`, `h' = g2(g1(θ(x + h)) + h)`.
pub fn rla_block<'t, T: Real>(
    x: Var<'t, T>,
    h: Var<'t, T>,
    theta: &Residual<'t, T>,
    hidden: &HiddenPath<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if x.shape() != h.shape() {
        return Err(config_err(format!(
            "hidden state {:?} does not match features {:?}",
            h.shape(),
            x.shape()
        )));
    }
    let y = theta.apply(x.add(h)?)?;
    let x_next = y.add(x)?;
    let inner = y.conv2d(hidden.g1, None, 1, 0)?.add(h)?;
    let h_next = inner.conv2d(hidden.g2_w, Some(hidden.g2_b), 1, 1)?;
    Ok((x_next, h_next))
}

fn conv_gn_relu<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, stride: usize, groups: usize) -> Result<Var<'t, T>> {
    Ok(x.conv2d(w, None, stride, 1)?.group_norm(groups, GN_EPS)?.relu())
}

/// Backbone stage outputs, finest first.
pub fn backbone<'t, T: Real>(cfg: &DetectorConfig, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
    let g = cfg.groups;
    let mut x = conv_gn_relu(images, p.get("stem.conv.w")?, 2, g)?;
    let mut outs = Vec::with_capacity(cfg.widths.len());
    for s in 0..cfg.widths.len() {
        let stage = format!("backbone.stage{s}");
        x = conv_gn_relu(x, p.get(&format!("{stage}.down.w"))?, 2, g)?;
        let hidden = if cfg.rla {
            Some(HiddenPath {
                g1: p.get(&format!("{stage}.rla.g1.w"))?,
                g2_w: p.get(&format!("{stage}.rla.g2.w"))?,
                g2_b: p.get(&format!("{stage}.rla.g2.b"))?,
            })
        } else {
            None
        };
        let mut h = x.tape().constant(Tensor::zeros(&x.shape()));
        for b in 0..cfg.blocks_per_stage {
            let theta = Residual {
                conv1: p.get(&format!("{stage}.block{b}.conv1.w"))?,
                conv2: p.get(&format!("{stage}.block{b}.conv2.w"))?,
                groups: g,
            };
            match &hidden {
                Some(hp) => (x, h) = rla_block(x, h, &theta, hp)?,
                None => x = theta.apply(x)?.add(x)?,
            }
        }
        outs.push(x);
    }
    Ok(outs)
}

/// Full detector forward on `[n, 3, H, W]` images.
pub fn forward<'t, T: Real>(cfg: &DetectorConfig, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<HeadOutput<'t, T>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(config_err(format!("expected [n, 3, H, W] images, got {shape:?}")));
    }
    cfg.geometry(shape[2], shape[3])?;
    let feats = backbone(cfg, p, images)?;

    let n_levels = feats.len();
    let mut laterals = Vec::with_capacity(n_levels);
    for (s, f) in feats.iter().enumerate() {
        laterals.push(f.conv2d(
            p.get(&format!("neck.lateral{s}.w"))?,
            Some(p.get(&format!("neck.lateral{s}.b"))?),
            1,
            0,
        )?);
    }
    let mut merged = vec![laterals[n_levels - 1]; n_levels];
    for s in (0..n_levels - 1).rev() {
        merged[s] = laterals[s].add(merged[s + 1].upsample_nearest(2)?)?;
    }
    let mut levels = Vec::with_capacity(n_levels);
    for (s, m) in merged.into_iter().enumerate() {
        let feat = m.conv2d(p.get(&format!("neck.out{s}.w"))?, Some(p.get(&format!("neck.out{s}.b"))?), 1, 1)?;
        levels.push(head(cfg, p, feat)?);
    }
    Ok(HeadOutput { levels })
}

fn head<'t, T: Real>(cfg: &DetectorConfig, p: &Bound<'t, T>, feat: Var<'t, T>) -> Result<LevelOutput<'t, T>> {
    let mut c = feat;
    let mut r = feat;
    for i in 0..cfg.head_convs {
        c = conv_gn_relu(c, p.get(&format!("head.cls_tower{i}.w"))?, 1, cfg.groups)?;
        r = conv_gn_relu(r, p.get(&format!("head.reg_tower{i}.w"))?, 1, cfg.groups)?;
    }
    Ok(LevelOutput {
        cls: c.conv2d(p.get("head.cls_out.w")?, Some(p.get("head.cls_out.b")?), 1, 1)?,
        ctr: r.conv2d(p.get("head.ctr_out.w")?, Some(p.get("head.ctr_out.b")?), 1, 1)?,
        dist: r.conv2d(p.get("head.dist_out.w")?, Some(p.get("head.dist_out.b")?), 1, 1)?.exp(),
    })
}
