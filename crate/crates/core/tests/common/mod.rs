//! Independent reference implementations used as test oracles. Everything
//! here works on plain `f64` slices and recomputes from definitions.
#![allow(dead_code)]

use dsl_autodiff::Tensor;
use dsl_core::dataset::Annotation;
use dsl_core::detector::Detection;
use dsl_core::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Direct convolution sum over `[n, c, h, w]` input and `[o, c, k, k]` weights.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (xd, wdd) = (x.data(), w.data());
    let mut out = vec![0.0; n * o * oh * ow];
    for img in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += xd[((img * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * wdd[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((img * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, oh, ow], out).unwrap()
}

/// Group normalization without affine parameters (biased variance).
pub fn group_norm(x: &Tensor<f64>, groups: usize, eps: f64) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let hw: usize = x.shape()[2..].iter().product();
    let per = c / groups * hw;
    let mut out = x.data().to_vec();
    for chunk in out.chunks_mut(per) {
        let mean = chunk.iter().sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    let _ = n;
    Tensor::from_vec(x.shape(), out).unwrap()
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    a.zip_map(b, |x, y| x + y).unwrap()
}

/// `θ(x) = GN(conv2(ReLU(GN(conv1(x)))))` with 3x3 same-padding convolutions.
pub fn residual(x: &Tensor<f64>, conv1: &Tensor<f64>, conv2: &Tensor<f64>, groups: usize, eps: f64) -> Tensor<f64> {
    let y = relu(&group_norm(&conv2d(x, conv1, None, 1, 1), groups, eps));
    group_norm(&conv2d(&y, conv2, None, 1, 1), groups, eps)
}

/// One recurrent aggregation step composed from its equations:
/// `y = θ(x + h)`, `x' = y + x`, `h' = g2(g1(y) + h)`.
#[allow(clippy::too_many_arguments)]
pub fn rla_step(
    x: &Tensor<f64>,
    h: &Tensor<f64>,
    conv1: &Tensor<f64>,
    conv2: &Tensor<f64>,
    g1: &Tensor<f64>,
    g2_w: &Tensor<f64>,
    g2_b: &Tensor<f64>,
    groups: usize,
    eps: f64,
) -> (Tensor<f64>, Tensor<f64>) {
    let y = residual(&add(x, h), conv1, conv2, groups, eps);
    let x_next = add(&y, x);
    let inner = add(&conv2d(&y, g1, None, 1, 0), h);
    (x_next, conv2d(&inner, g2_w, Some(g2_b), 1, 1))
}

/// Per-pixel targets of one level computed from first principles.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLevel {
    pub labels: Vec<i32>,
    pub dist: Vec<f64>,
    pub centerness: Vec<f64>,
}

/// Exhaustive assignment: for every pixel of a `side / stride` grid, every
/// box is examined; the smallest box strictly containing the pixel center
/// whose largest side distance falls in `[lo, hi)` wins, earlier boxes on ties.
pub fn assign_oracle(anns: &[Annotation], side: usize, stride: usize, range: (f64, f64), num_classes: usize) -> OracleLevel {
    let g = side / stride;
    let n = g * g;
    let mut out = OracleLevel {
        labels: vec![num_classes as i32; n],
        dist: vec![0.0; 4 * n],
        centerness: vec![0.0; n],
    };
    let s = stride as f64;
    for row in 0..g {
        for col in 0..g {
            let (cx, cy) = (col as f64 * s + s / 2.0, row as f64 * s + s / 2.0);
            let mut winner: Option<usize> = None;
            for (i, a) in anns.iter().enumerate() {
                let b = a.bbox;
                let inside = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
                let d = [cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy];
                let m = d.iter().cloned().fold(f64::MIN, f64::max);
                if !inside || m < range.0 || m >= range.1 {
                    continue;
                }
                let area = (b.x2 - b.x1) * (b.y2 - b.y1);
                let better = match winner {
                    None => true,
                    Some(w) => {
                        let wb = anns[w].bbox;
                        area < (wb.x2 - wb.x1) * (wb.y2 - wb.y1)
                    }
                };
                if better {
                    winner = Some(i);
                }
            }
            if let Some(i) = winner {
                let b = anns[i].bbox;
                let p = row * g + col;
                let (l, t, r, bt) = (cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy);
                out.labels[p] = anns[i].category as i32;
                for (ch, v) in [l, t, r, bt].into_iter().enumerate() {
                    out.dist[ch * n + p] = v / s;
                }
                out.centerness[p] = ((l.min(r) / l.max(r)) * (t.min(bt) / t.max(bt))).sqrt();
            }
        }
    }
    out
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic suppression: the full pairwise suppression matrix is built
/// first, then candidates are resolved in descending score order.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal scores keep input order.
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let suppresses: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| dets[i].category == dets[j].category && box_iou(&dets[i].bbox, &dets[j].bbox) > thr)
                .collect()
        })
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if !kept.iter().any(|&k| suppresses[k][i]) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// AP of one category at one IoU threshold. Matching walks detections in
/// descending score over all images; each takes the best still-free ground
/// truth of its image. Precision at each of the 101 recall points is the
/// maximum precision over every prefix reaching that recall.
pub fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], category: usize, thr: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|a| a.category == category).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut all: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().filter(|d| d.category == category).map(move |d| (i, *d)))
        .collect();
    all.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut free: Vec<Vec<bool>> = gts.iter().map(|g| g.iter().map(|a| a.category == category).collect()).collect();
    let mut flags = Vec::new();
    for (img, d) in &all {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if !free[*img][j] {
                continue;
            }
            let o = box_iou(&d.bbox, &g.bbox);
            if o >= thr && best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            free[*img][j] = false;
        }
        flags.push(best.is_some());
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let total: f64 = (0..=100)
        .map(|r| {
            let r = r as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

/// Integer-cornered box inside a `side` square with sides in `[lo, hi]`.
pub fn random_box(rng: &mut ChaCha8Rng, side: usize, lo: usize, hi: usize) -> BBox {
    let w = rng.gen_range(lo..=hi.min(side));
    let h = rng.gen_range(lo..=hi.min(side));
    let x = rng.gen_range(0..=side - w) as f64;
    let y = rng.gen_range(0..=side - h) as f64;
    BBox::new(x, y, x + w as f64, y + h as f64)
}
