//! Dense detection losses, the cross-scale consistency term and the total objective.

use std::rc::Rc;

use dsl_autodiff::{Real, Tensor, Var};

use crate::detector::{DenseTargets, HeadOutput, LevelOutput, IGNORE};
use crate::error::{config_err, Result};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss of one logit against a binary target.
pub fn focal_term(x: f64, positive: bool) -> f64 {
    let p = dsl_autodiff::sigmoid(x);
    if positive {
        FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * softplus(-x)
    } else {
        (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * softplus(x)
    }
}

fn focal_grad(x: f64, positive: bool) -> f64 {
    let p = dsl_autodiff::sigmoid(x);
    if positive {
        // ln p = -softplus(-x)
        FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * (-FOCAL_GAMMA * p * softplus(-x) - (1.0 - p))
    } else {
        (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * (p + FOCAL_GAMMA * (1.0 - p) * softplus(x))
    }
}

/// Summed focal loss over `[n, C, h, w]` logits. `labels` holds one entry
/// per `(n, h, w)` pixel; pixels labeled [`IGNORE`] add nothing to the loss
/// or the gradient.
pub fn focal_loss_sum<'t, T: Real>(logits: Var<'t, T>, labels: &[i32]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let &[n, c, h, w] = shape.as_slice() else {
        return Err(config_err(format!("focal loss expects [n, C, h, w] logits, got {shape:?}")));
    };
    if labels.len() != n * h * w {
        return Err(config_err(format!("{} labels for {} pixels", labels.len(), n * h * w)));
    }
    let hw = h * w;
    let x = logits.value();
    let xd = x.data();
    let mut total = 0.0;
    for (pix, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let (img, p) = (pix / hw, pix % hw);
        for k in 0..c {
            total += focal_term(xd[(img * c + k) * hw + p].as_f64(), label == k as i32);
        }
    }
    let labels: Rc<Vec<i32>> = Rc::new(labels.to_vec());
    let out = logits.tape().custom(
        &[logits],
        Tensor::scalar(T::from_f64(total)),
        Box::new(move |ctx| {
            let xd = ctx.inputs[0].data();
            let g = ctx.grad.item().as_f64();
            let mut gx = Tensor::zeros(ctx.inputs[0].shape());
            let gd = gx.data_mut();
            for (pix, &label) in labels.iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                let (img, p) = (pix / hw, pix % hw);
                for k in 0..c {
                    let i = (img * c + k) * hw + p;
                    gd[i] = T::from_f64(g * focal_grad(xd[i].as_f64(), label == k as i32));
                }
            }
            vec![Some(gx)]
        }),
    )?;
    Ok(out)
}

/// Summed binary cross-entropy with logits against soft targets of the same shape.
pub fn bce_with_logits_sum<'t, T: Real>(logits: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let x = logits.value();
    if x.shape() != targets.shape() {
        return Err(config_err(format!(
            "BCE targets {:?} do not match logits {:?}",
            targets.shape(),
            x.shape()
        )));
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| softplus(x.as_f64()) - x.as_f64() * y.as_f64())
        .sum();
    let targets = Rc::new(targets.clone());
    let out = logits.tape().custom(
        &[logits],
        Tensor::scalar(T::from_f64(total)),
        Box::new(move |ctx| {
            let g = ctx.grad.item();
            let gx = ctx.inputs[0].zip_map(&targets, |x, y| g * (dsl_autodiff::sigmoid(x) - y)).unwrap();
            vec![Some(gx)]
        }),
    )?;
    Ok(out)
}

/// Summed `-ln(IoU)` between predicted and target (l, t, r, b) distances
/// measured from the same point. Both are `[P]` per side.
pub fn iou_loss_sum<'t, T: Real>(pred: [Var<'t, T>; 4], target: [Var<'t, T>; 4]) -> Result<Var<'t, T>> {
    let [pl, pt, pr, pb] = pred;
    let [tl, tt, tr, tb] = target;
    let pred_area = pl.add(pr)?.mul(pt.add(pb)?)?;
    let target_area = tl.add(tr)?.mul(tt.add(tb)?)?;
    let iw = pl.minimum(tl)?.add(pr.minimum(tr)?)?;
    let ih = pt.minimum(tt)?.add(pb.minimum(tb)?)?;
    let inter = iw.mul(ih)?;
    let union = pred_area.add(target_area)?.sub(inter)?;
    Ok(inter.div(union)?.log()?.neg().sum_all())
}

/// Loss value with its unnormalized-by-weight parts, for logging.
#[derive(Clone, Copy, Debug)]
pub struct DenseLoss<'t, T: Real> {
    pub loss: Var<'t, T>,
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub num_pos: usize,
}

/// Focal classification over all non-ignored pixels plus IoU and centerness
/// terms on positives, normalized by the positive count (at least 1).
pub fn dense_loss<'t, T: Real>(pred: &HeadOutput<'t, T>, targets: &[DenseTargets]) -> Result<DenseLoss<'t, T>> {
    let n = pred.batch_size();
    if targets.len() != n {
        return Err(config_err(format!("{} target sets for a batch of {n}", targets.len())));
    }
    let tape = match pred.levels.first() {
        Some(l) => l.cls.tape(),
        None => return Err(config_err("prediction has no levels")),
    };
    let zero = || tape.constant(Tensor::scalar(T::zero()));
    let (mut cls_sum, mut reg_sum, mut ctr_sum) = (zero(), zero(), zero());
    let mut num_pos = 0;
    for (li, out) in pred.levels.iter().enumerate() {
        let shape = out.cls.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let hw = h * w;
        let mut labels = Vec::with_capacity(n * hw);
        let mut pos = Vec::new();
        for (img, t) in targets.iter().enumerate() {
            let lt = t.levels.get(li).ok_or_else(|| config_err(format!("targets lack level {li}")))?;
            if (lt.height, lt.width) != (h, w) || t.num_classes != c {
                return Err(config_err(format!(
                    "level {li} targets {}x{} ({} classes) vs prediction {h}x{w} ({c} classes)",
                    lt.height, lt.width, t.num_classes
                )));
            }
            labels.extend_from_slice(&lt.labels);
            for p in 0..hw {
                if (0..c as i32).contains(&lt.labels[p]) {
                    pos.push((img, p));
                }
            }
        }
        cls_sum = cls_sum.add(focal_loss_sum(out.cls, &labels)?)?;
        if pos.is_empty() {
            continue;
        }
        num_pos += pos.len();
        let np = pos.len();
        let side = |ch: usize| -> Result<(Var<'t, T>, Var<'t, T>)> {
            let idx = pos.iter().map(|&(img, p)| (img * 4 + ch) * hw + p).collect();
            let pred_side = out.dist.take(idx, &[np])?;
            let tgt = Tensor::from_fn(&[np], |k| {
                let (img, p) = pos[k];
                T::from_f64(targets[img].levels[li].dist[ch * hw + p])
            });
            Ok((pred_side, tape.constant(tgt)))
        };
        let sides = [side(0)?, side(1)?, side(2)?, side(3)?];
        let reg = iou_loss_sum(sides.map(|s| s.0), sides.map(|s| s.1))?;
        reg_sum = reg_sum.add(reg)?;
        let ctr_logits = out.ctr.take(pos.iter().map(|&(img, p)| img * hw + p).collect(), &[np])?;
        let ctr_tgt = Tensor::from_fn(&[np], |k| {
            let (img, p) = pos[k];
            T::from_f64(targets[img].levels[li].centerness[p])
        });
        ctr_sum = ctr_sum.add(bce_with_logits_sum(ctr_logits, &ctr_tgt)?)?;
    }
    let norm = T::one() / T::from_f64(num_pos.max(1) as f64);
    let (cls, reg, ctr) = (cls_sum.scale(norm), reg_sum.scale(norm), ctr_sum.scale(norm));
    let loss = cls.add(reg)?.add(ctr)?;
    let v = |x: Var<'t, T>| x.value().item().as_f64();
    Ok(DenseLoss {
        loss,
        cls: v(cls),
        reg: v(reg),
        ctr: v(ctr),
        num_pos,
    })
}

/// Loss on labeled targets.
pub fn supervised_loss<'t, T: Real>(pred: &HeadOutput<'t, T>, targets: &[DenseTargets]) -> Result<DenseLoss<'t, T>> {
    dense_loss(pred, targets)
}

/// Loss on pseudo-targets; ignorable pixels are excluded from every term.
pub fn unsupervised_loss<'t, T: Real>(pred: &HeadOutput<'t, T>, pseudo: &[DenseTargets]) -> Result<DenseLoss<'t, T>> {
    dense_loss(pred, pseudo)
}

/// Per-pixel score map `sigmoid(cls) * sigmoid(ctr)`, `[n, C, h, w]`.
pub fn score_map<'t, T: Real>(level: &LevelOutput<'t, T>) -> Result<Var<'t, T>> {
    Ok(level.cls.sigmoid().mul(level.ctr.sigmoid())?)
}

/// `sum_v mean((d_v - sp_{v+1})^2)`: level `v` of the downsampled input
/// against level `v + 1` of the full-resolution input.
pub fn scale_consistency_loss<'t, T: Real>(maps_d: &[Var<'t, T>], maps_sp: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let pairs = maps_d.len().min(maps_sp.len().saturating_sub(1));
    let Some(first) = maps_sp.first() else {
        return Err(config_err("empty score pyramid"));
    };
    let mut total = first.tape().constant(Tensor::scalar(T::zero()));
    for v in 0..pairs {
        let (a, b) = (maps_d[v], maps_sp[v + 1]);
        if a.shape() != b.shape() {
            return Err(config_err(format!(
                "downsampled level {v} {:?} does not match level {} {:?}",
                a.shape(),
                v + 1,
                b.shape()
            )));
        }
        let d = a.sub(b)?;
        total = total.add(d.mul(d)?.mean_all()?)?;
    }
    Ok(total)
}

/// `L = L_s + alpha * L_u + gamma * L_scale`.
pub fn total_loss<'t, T: Real>(
    l_s: Var<'t, T>,
    l_u: Var<'t, T>,
    l_scale: Var<'t, T>,
    alpha: f64,
    gamma_scale: f64,
) -> Result<Var<'t, T>> {
    if !(alpha >= 0.0) || !(gamma_scale >= 0.0) {
        return Err(config_err(format!("loss weights must be non-negative, got {alpha} and {gamma_scale}")));
    }
    Ok(l_s
        .add(l_u.scale(T::from_f64(alpha)))?
        .add(l_scale.scale(T::from_f64(gamma_scale)))?)
}
