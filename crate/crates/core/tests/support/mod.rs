//! Brute-force reference implementations and random instance generators
//! shared by the integration tests. Everything here is written with plain
//! loops over `f64` and does not call into the crate's numeric code.

#![allow(dead_code)]

use protoseg_core::data::{PointCloudBlock, FEATURE_DIM};
use protoseg_core::derive_rng;
use protoseg_core::episode::{Episode, QueryItem, SupportShot};
use protoseg_core::Rng;
use protoseg_core::Tensor;
use rand::Rng as _;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    let (m, n) = t.dims2();
    (0..m).map(|i| (0..n).map(|j| t.data()[i * n + j]).collect()).collect()
}

pub fn tensor(rows: &Rows) -> Tensor {
    let n = rows[0].len();
    Tensor::matrix(rows.len(), n, rows.iter().flatten().copied().collect()).unwrap()
}

/// `|a - b| <= tol · max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn all_close(a: &Rows, b: &Rows, tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(u, v)| close(*u, *v, tol)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Background row first, then one row per class.
pub fn masked_average_pool(features: &[Vec<Rows>], masks: &[Vec<Vec<bool>>]) -> Rows {
    let d = features[0][0][0].len();
    let mut out = vec![vec![0.0; d]];
    let mut bg_shots = 0usize;
    for (shots, shot_masks) in features.iter().zip(masks) {
        let mut proto = vec![0.0; d];
        for (f, m) in shots.iter().zip(shot_masks) {
            let mut fg = vec![0.0; d];
            let mut bg = vec![0.0; d];
            let (mut nf, mut nb) = (0usize, 0usize);
            for (row, &inside) in f.iter().zip(m) {
                let (acc, count) = if inside { (&mut fg, &mut nf) } else { (&mut bg, &mut nb) };
                for j in 0..d {
                    acc[j] += row[j];
                }
                *count += 1;
            }
            for j in 0..d {
                proto[j] += fg[j] / nf as f64;
            }
            if nb > 0 {
                bg_shots += 1;
                for j in 0..d {
                    out[0][j] += bg[j] / nb as f64;
                }
            }
        }
        out.push(proto.iter().map(|v| v / shots.len() as f64).collect());
    }
    for v in &mut out[0] {
        *v /= bg_shots as f64;
    }
    out
}

/// Softmax over `alpha · cos(f_x, p_i)` for every point.
pub fn score_probs(query: &Rows, protos: &Rows, alpha: f64) -> Rows {
    query
        .iter()
        .map(|f| {
            let logits: Vec<f64> = protos.iter().map(|p| alpha * cosine(f, p)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
        .collect()
}

pub fn segmentation_loss(probs: &Rows, gt: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &g) in probs.iter().zip(gt) {
        total -= p[g].ln();
    }
    total / gt.len() as f64
}

pub struct SelfRecon {
    pub loss: f64,
    pub masks: Vec<Vec<Vec<bool>>>,
    pub iou: Vec<Vec<f64>>,
}

pub fn self_reconstruct(features: &[Vec<Rows>], masks: &[Vec<Vec<bool>>], protos: &Rows, alpha: f64) -> SelfRecon {
    let mut shot_losses = Vec::new();
    let mut out_masks = Vec::new();
    let mut out_iou = Vec::new();
    for (c, (shots, shot_masks)) in features.iter().zip(masks).enumerate() {
        let pair = [protos[0].clone(), protos[c + 1].clone()];
        let mut cm = Vec::new();
        let mut ci = Vec::new();
        for (f, m) in shots.iter().zip(shot_masks) {
            let mut nll = 0.0;
            let mut pred = Vec::with_capacity(f.len());
            for (row, &inside) in f.iter().zip(m) {
                let l0 = alpha * cosine(row, &pair[0]);
                let l1 = alpha * cosine(row, &pair[1]);
                let max = l0.max(l1);
                let lse = max + ((l0 - max).exp() + (l1 - max).exp()).ln();
                let (lp0, lp1) = (l0 - lse, l1 - lse);
                nll -= if inside { lp1 } else { lp0 };
                pred.push(lp1 > lp0);
            }
            shot_losses.push(nll / f.len() as f64);
            let tp = pred.iter().zip(m).filter(|(p, g)| **p && **g).count();
            let union = pred.iter().zip(m).filter(|(p, g)| **p || **g).count();
            ci.push(if union == 0 { 1.0 } else { tp as f64 / union as f64 });
            cm.push(pred);
        }
        out_masks.push(cm);
        out_iou.push(ci);
    }
    SelfRecon {
        loss: shot_losses.iter().sum::<f64>() / shot_losses.len() as f64,
        masks: out_masks,
        iou: out_iou,
    }
}

/// Biased multi-bandwidth MMD with self pairs included.
pub fn mmd(x: &Rows, y: &Rows, bandwidths: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64], s: f64| {
        let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        (-d / (2.0 * s * s)).exp()
    };
    let mut total = 0.0;
    for &s in bandwidths {
        for i in 0..x.len() {
            for j in 0..x.len() {
                total += k(&x[i], &x[j], s) + k(&y[i], &y[j], s) - 2.0 * k(&x[i], &y[j], s);
            }
        }
    }
    total
}

/// Accumulated IoU per global class over `(class_map, pred, gt)` triples,
/// then averaged over the classes that occurred. Returns the mean and the
/// per-class values in `classes` order (absent classes skipped).
pub fn mean_iou(queries: &[(Vec<usize>, Vec<usize>, Vec<usize>)], classes: &[usize]) -> (f64, Vec<(usize, f64)>) {
    let mut per_class = Vec::new();
    for &g in classes {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (map, pred, gt) in queries {
            let Some(pos) = map.iter().position(|&c| c == g) else { continue };
            let label = pos + 1;
            for i in 0..pred.len() {
                match (pred[i] == label, gt[i] == label) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        if tp + fp + fn_ > 0 {
            per_class.push((g, tp as f64 / (tp + fp + fn_) as f64));
        }
    }
    let mean = per_class.iter().map(|c| c.1).sum::<f64>() / per_class.len() as f64;
    (mean, per_class)
}

/// Random rows in `[-1, 1)`.
pub fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Mask with at least one set entry; all set with probability `full`.
pub fn random_mask(n: usize, full: f64, rng: &mut Rng) -> Vec<bool> {
    if rng.random_bool(full) {
        return vec![true; n];
    }
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    let i = rng.random_range(0..n);
    m[i] = true;
    m
}

/// A random support set for MAP and self-reconstruction. At least one shot
/// keeps a background point.
pub struct SupportInstance {
    pub features: Vec<Vec<Rows>>,
    pub masks: Vec<Vec<Vec<bool>>>,
    pub alpha: f64,
}

impl SupportInstance {
    pub fn random(seed: u64) -> Self {
        let mut rng = derive_rng(seed, 0x7e57);
        let ways = rng.random_range(1..=3);
        let shots = rng.random_range(1..=3);
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=6);
        let features = (0..ways).map(|_| (0..shots).map(|_| random_rows(n, d, &mut rng)).collect()).collect();
        let mut masks: Vec<Vec<Vec<bool>>> =
            (0..ways).map(|_| (0..shots).map(|_| random_mask(n, 0.15, &mut rng)).collect()).collect();
        if masks.iter().flatten().all(|m| m.iter().all(|&v| v)) {
            masks[0][0][0] = false;
            masks[0][0][n - 1] = true;
        }
        let alpha = rng.random_range(0.5..30.0);
        SupportInstance { features, masks, alpha }
    }

    pub fn tensors(&self) -> Vec<Vec<Tensor>> {
        self.features.iter().map(|s| s.iter().map(tensor).collect()).collect()
    }
}

/// A block of `n` random points, labels drawn from `labels`.
pub fn random_block(n: usize, labels: &[usize], rng: &mut Rng) -> PointCloudBlock {
    let points = (0..n)
        .map(|_| {
            let mut p = [0.0; FEATURE_DIM];
            for v in &mut p {
                *v = rng.random_range(0.0..1.0);
            }
            p
        })
        .collect();
    let labels = (0..n).map(|_| labels[rng.random_range(0..labels.len())]).collect();
    PointCloudBlock::new(points, labels).unwrap()
}

/// A random `ways`-way 1-shot episode over global classes `class_map`.
/// Every support block contains its class and some background.
pub fn random_episode(n: usize, class_map: &[usize], rng: &mut Rng) -> Episode {
    let mut palette = vec![0];
    palette.extend_from_slice(class_map);
    let support = class_map
        .iter()
        .map(|&c| {
            let mut block = random_block(n, &palette, rng);
            block.labels[0] = c;
            block.labels[1] = 0;
            let mask = block.labels.iter().map(|&l| l == c).collect();
            vec![SupportShot { block, source: 0, mask }]
        })
        .collect();
    let query = random_block(n, &palette, rng);
    let mask = query
        .labels
        .iter()
        .map(|&l| class_map.iter().position(|&c| c == l).map_or(0, |p| p + 1))
        .collect();
    Episode { support, queries: vec![QueryItem { block: query, source: 0, mask }], class_map: class_map.to_vec() }
}
