// SPDX-License-Identifier: Apache-2.0

//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use advseg::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn rand_labels(rng: &mut impl Rng, n: usize, c: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..c as u32)).collect()
}

// --- finite differences ----------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

// --- softmax / Lovász references ---------------------------------------------------

pub fn softmax_ref(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Jaccard loss of the mispredicted set `m` against the foreground set `gt`.
fn jaccard_loss(gt: &BTreeSet<usize>, m: &BTreeSet<usize>) -> f64 {
    let union: BTreeSet<usize> = gt.union(m).copied().collect();
    if union.is_empty() {
        return 0.0;
    }
    let kept = gt.difference(m).count();
    1.0 - kept as f64 / union.len() as f64
}

/// Lovász extension of the Jaccard loss, evaluated along the interpolation path:
/// sort errors descending and sum `err_i * (Δ(first i) − Δ(first i−1))` with every
/// set difference computed from scratch.
pub fn lovasz_extension_ref(errors: &[f64], fg: &[bool]) -> f64 {
    let gt: BTreeSet<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let mut prefix = BTreeSet::new();
    let mut prev = 0.0;
    let mut total = 0.0;
    for &i in &order {
        prefix.insert(i);
        let cur = jaccard_loss(&gt, &prefix);
        total += errors[i] * (cur - prev);
        prev = cur;
    }
    total
}

/// Lovász-softmax over the given classes from logits, by the reference extension.
pub fn lovasz_softmax_ref(logits: &[Vec<f64>], labels: &[u32], classes: &[usize]) -> f64 {
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax_ref(z)).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in classes {
        let fg: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        let err: Vec<f64> = probs
            .iter()
            .zip(&fg)
            .map(|(p, &f)| (if f { 1.0 } else { 0.0 } - p[c]).abs())
            .collect();
        sum += lovasz_extension_ref(&err, &fg);
    }
    sum / classes.len() as f64
}

/// Smallest gap between distinct sorted values; infinity for fewer than two.
pub fn min_gap(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

// --- metrics reference ----------------------------------------------------------

/// IoU per class from index sets; `None` when the union is empty.
pub fn iou_by_sets(preds: &[u32], truth: &[u32], c: usize) -> Vec<Option<f64>> {
    (0..c as u32)
        .map(|k| {
            let p: BTreeSet<usize> = (0..preds.len()).filter(|&i| preds[i] == k).collect();
            let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
            let inter = p.intersection(&t).count();
            let union = p.union(&t).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

/// Mean over defined entries (absent classes skipped), in class order.
pub fn mean_defined(iou: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = iou.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

// --- geometry references -----------------------------------------------------------

fn euclid(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// All-pairs neighbor features: xyz, intensity, range, count within radius, mean
/// distance to the k nearest others (ascending sum, sentinel 2·radius when alone).
pub fn neighbor_features_ref(points: &[[f64; 4]], radius: f64, k: usize) -> Vec<[f64; 7]> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| euclid(p, q))
                .collect();
            let count = d.iter().filter(|&&x| x <= radius).count();
            d.sort_by(f64::total_cmp);
            let knn = if d.is_empty() {
                2.0 * radius
            } else {
                let take = k.min(d.len());
                d[..take].iter().sum::<f64>() / take as f64
            };
            let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0], p[1], p[2], p[3], range, count as f64, knn]
        })
        .collect()
}

/// `atan2` azimuth in `[0, 2π)`.
pub fn azimuth_ref(x: f64, y: f64) -> f64 {
    let a = y.atan2(x);
    let a = if a < 0.0 { a + TAU } else { a };
    if a >= TAU {
        0.0
    } else {
        a
    }
}

pub fn in_sector_ref(p: &[f64; 4], start: f64, width: f64) -> bool {
    let a = if p[0] == 0.0 && p[1] == 0.0 { 0.0 } else { azimuth_ref(p[0], p[1]) };
    (a - start).rem_euclid(TAU) < width
}

pub fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<[f64; 4]> {
    (0..n)
        .map(|_| {
            [
                extent * (2.0 * rng.random::<f64>() - 1.0),
                extent * (2.0 * rng.random::<f64>() - 1.0),
                0.3 * extent * (2.0 * rng.random::<f64>() - 1.0),
                rng.random::<f64>(),
            ]
        })
        .collect()
}
