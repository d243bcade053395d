// SPDX-License-Identifier: Apache-2.0

//! Training objectives with analytic gradients.
//!
//! Every loss takes an `N x C` matrix of logits (or, for the triplet term, `N x D`
//! embeddings) and returns the scalar value averaged over points together with its
//! gradient with respect to that same matrix.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
}

impl LossOutput {
    pub fn zero(rows: usize, cols: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }

    /// `self += w * other`
    pub fn accumulate(&mut self, other: &LossOutput, w: f64) {
        self.value += w * other.value;
        self.grad.add_scaled(&other.grad, w);
    }
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `ln Σ exp(z)` with max subtraction.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax, computed with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let (z, o) = (logits.row(r), out.row_mut(r));
        softmax_row(z, o);
    }
    out
}

/// Row-wise softmax over a temperature-scaled subset of columns.
fn softmax_columns(logits: &Matrix, cols: &[usize], temperature: f64) -> Matrix {
    let mut z = Matrix::zeros(logits.rows(), cols.len());
    for r in 0..logits.rows() {
        for (j, &c) in cols.iter().enumerate() {
            z.set(r, j, logits.get(r, c) / temperature);
        }
    }
    softmax(&z)
}

fn check_labels(logits: &Matrix, labels: &[u32]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::arg(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l as usize >= logits.cols()) {
        return Err(Error::arg(format!(
            "label {} at point {i} outside {} classes",
            labels[i],
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean cross-entropy `-log p_y`; gradient `(softmax - onehot) / N`.
pub fn ce_loss(logits: &Matrix, labels: &[u32]) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    let n = logits.rows();
    if n == 0 {
        return Ok(LossOutput::zero(0, logits.cols()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = softmax(logits);
    let mut value = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = logits.row(r);
        value += log_sum_exp(z) - z[y as usize];
        let g = grad.row_mut(r);
        g[y as usize] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(LossOutput {
        value: value * inv_n,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceParams {
    pub alpha: f64,
    pub beta: f64,
    /// Value substituted for `log 0` in the reverse term; must be negative.
    pub clip_log: f64,
}

impl Default for SceParams {
    fn default() -> Self {
        SceParams {
            alpha: 1.0,
            beta: 1.0,
            clip_log: -6.0,
        }
    }
}

/// Symmetric cross-entropy `alpha * CE + beta * RCE`, where the reverse term is
/// `-Σ_k p_k log(onehot_k)` with `log 0` replaced by `clip_log`, i.e.
/// `-clip_log * (1 - p_y)` per point.
pub fn sce_loss(logits: &Matrix, labels: &[u32], params: SceParams) -> Result<LossOutput> {
    let SceParams {
        alpha,
        beta,
        clip_log,
    } = params;
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::arg("SCE weights must be non-negative"));
    }
    if !(clip_log < 0.0) {
        return Err(Error::arg("SCE clip_log must be negative"));
    }
    let ce = ce_loss(logits, labels)?;
    let n = logits.rows();
    if n == 0 {
        return Ok(ce);
    }
    let inv_n = 1.0 / n as f64;
    let p = softmax(logits);
    let mut rce = LossOutput::zero(n, logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        let pr = p.row(r);
        let py = pr[y as usize];
        rce.value += -clip_log * (1.0 - py);
        // d(-A(1 - p_y))/dz_j = A p_y (δ_jy - p_j)
        let g = rce.grad.row_mut(r);
        for (j, gj) in g.iter_mut().enumerate() {
            let delta = if j == y as usize { 1.0 } else { 0.0 };
            *gj = clip_log * py * (delta - pr[j]) * inv_n;
        }
    }
    rce.value *= inv_n;
    let mut out = LossOutput::zero(n, logits.cols());
    out.accumulate(&ce, alpha);
    if beta != 0.0 {
        out.accumulate(&rce, beta);
    }
    Ok(out)
}

/// Soft-target distillation over the base-class columns only.
///
/// The student's `base_ids` columns and the teacher's columns are softened by
/// `temperature`; the value is `T² · mean_n(-Σ_j q_j log p_j)` and the gradient is zero
/// on every non-base column.
pub fn kd_loss(
    student: &Matrix,
    teacher: &Matrix,
    base_ids: &[usize],
    temperature: f64,
) -> Result<LossOutput> {
    if student.rows() != teacher.rows() || teacher.cols() != base_ids.len() {
        return Err(Error::arg(format!(
            "KD shape mismatch: student {:?}, teacher {:?}, {} base ids",
            student.shape(),
            teacher.shape(),
            base_ids.len()
        )));
    }
    if base_ids.iter().any(|&c| c >= student.cols()) {
        return Err(Error::arg("KD base id outside student columns"));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg("KD temperature must be positive"));
    }
    let n = student.rows();
    let mut out = LossOutput::zero(n, student.cols());
    if n == 0 {
        return Ok(out);
    }
    let t = temperature;
    let inv_n = 1.0 / n as f64;
    let q = softmax_columns(teacher, &(0..teacher.cols()).collect::<Vec<_>>(), t);
    let p = softmax_columns(student, base_ids, t);
    let mut zs = vec![0.0; base_ids.len()];
    for r in 0..n {
        for (j, &c) in base_ids.iter().enumerate() {
            zs[j] = student.get(r, c) / t;
        }
        let lse = log_sum_exp(&zs);
        let (qr, pr) = (q.row(r), p.row(r));
        let mut ce = 0.0;
        for j in 0..base_ids.len() {
            ce -= qr[j] * (zs[j] - lse);
        }
        out.value += ce;
        let g = out.grad.row_mut(r);
        for (j, &c) in base_ids.iter().enumerate() {
            // T² · (p - q) / T
            g[c] = t * (pr[j] - qr[j]) * inv_n;
        }
    }
    out.value *= t * t * inv_n;
    Ok(out)
}

/// Mean entropy of the temperature-softened teacher distribution, scaled by `T²`:
/// the lower bound of [`kd_loss`].
pub fn teacher_entropy(teacher: &Matrix, temperature: f64) -> f64 {
    let n = teacher.rows();
    if n == 0 {
        return 0.0;
    }
    let q = softmax_columns(teacher, &(0..teacher.cols()).collect::<Vec<_>>(), temperature);
    let mut h = 0.0;
    for r in 0..n {
        for &v in q.row(r) {
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
    }
    temperature * temperature * h / n as f64
}

/// Gradient of the Lovász extension of the Jaccard loss for errors sorted in
/// descending order, given the foreground flags in that order.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let inter = gts - cum_fg;
            let union = gts + cum_bg;
            let jac = 1.0 - inter / union;
            let g = jac - prev;
            prev = jac;
            g
        })
        .collect()
}

/// Classes present in the labels or in the argmax predictions, ascending.
fn present_classes(probs: &Matrix, labels: &[u32]) -> Vec<usize> {
    let mut seen = vec![false; probs.cols()];
    for &l in labels {
        seen[l as usize] = true;
    }
    for r in 0..probs.rows() {
        seen[argmax(probs.row(r))] = true;
    }
    (0..probs.cols()).filter(|&c| seen[c]).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Lovász-softmax on probabilities; gradient with respect to the probabilities.
///
/// With `classes = None` the loss averages over classes present in the labels or the
/// argmax predictions. Ties in the error ranking keep the original point order.
pub fn lovasz_softmax_probs(
    probs: &Matrix,
    labels: &[u32],
    classes: Option<&[usize]>,
) -> Result<LossOutput> {
    check_labels(probs, labels)?;
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(format!("row {r} is not a probability vector")));
        }
    }
    let n = probs.rows();
    let mut out = LossOutput::zero(n, probs.cols());
    let classes: Vec<usize> = match classes {
        Some(c) => {
            if c.iter().any(|&k| k >= probs.cols()) {
                return Err(Error::arg("Lovász class outside probability columns"));
            }
            c.to_vec()
        }
        None => present_classes(probs, labels),
    };
    if n == 0 || classes.is_empty() {
        return Ok(out);
    }
    let inv_c = 1.0 / classes.len() as f64;
    for &c in &classes {
        let fg: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        let errors: Vec<f64> = (0..n)
            .map(|i| {
                let p = probs.get(i, c);
                if fg[i] {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        // stable: ties stay in index order
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let g = lovasz_grad(&fg_sorted);
        for (rank, &i) in order.iter().enumerate() {
            out.value += inv_c * errors[i] * g[rank];
            let sign = if fg[i] { -1.0 } else { 1.0 };
            let cur = out.grad.get(i, c);
            out.grad.set(i, c, cur + inv_c * sign * g[rank]);
        }
    }
    Ok(out)
}

/// Lovász-softmax taking logits; the gradient is chained through the softmax.
pub fn lovasz_softmax(logits: &Matrix, labels: &[u32], classes: Option<&[usize]>) -> Result<LossOutput> {
    if !logits.is_finite() {
        return Err(Error::arg("non-finite logits"));
    }
    let p = softmax(logits);
    let lp = lovasz_softmax_probs(&p, labels, classes)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let (pr, gp) = (p.row(r), lp.grad.row(r));
        let dot: f64 = pr.iter().zip(gp).map(|(a, b)| a * b).sum();
        let g = grad.row_mut(r);
        for j in 0..pr.len() {
            g[j] = pr[j] * (gp[j] - dot);
        }
    }
    Ok(LossOutput {
        value: lp.value,
        grad,
    })
}

/// Batch-hard triplet hinge over the given anchors: for each anchor the farthest
/// same-label point and the nearest other-label point, `max(0, d_ap - d_an + margin)`,
/// averaged over anchors that have both. Euclidean distances.
pub fn triplet_reg_with_anchors(
    features: &Matrix,
    labels: &[u32],
    anchors: &[usize],
    margin: f64,
) -> Result<LossOutput> {
    if features.rows() != labels.len() {
        return Err(Error::arg("triplet: feature rows and labels differ"));
    }
    if !(margin > 0.0) {
        return Err(Error::arg("triplet margin must be positive"));
    }
    let (n, d) = features.shape();
    let mut out = LossOutput::zero(n, d);
    let dist = |a: usize, b: usize| -> f64 {
        features
            .row(a)
            .iter()
            .zip(features.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut terms: Vec<(usize, usize, usize, f64, f64)> = Vec::new();
    let mut used = 0usize;
    for &a in anchors {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dj = dist(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| dj > best) {
                    pos = Some((j, dj));
                }
            } else if neg.is_none_or(|(_, best)| dj < best) {
                neg = Some((j, dj));
            }
        }
        let (Some((p, dap)), Some((q, dan))) = (pos, neg) else {
            continue;
        };
        used += 1;
        let hinge = dap - dan + margin;
        if hinge > 0.0 {
            out.value += hinge;
            terms.push((a, p, q, dap, dan));
        }
    }
    if used == 0 {
        return Ok(out);
    }
    let inv = 1.0 / used as f64;
    out.value *= inv;
    for (a, p, q, dap, dan) in terms {
        for k in 0..d {
            let fa = features.get(a, k);
            // ∂d(a,b)/∂f_a = (f_a - f_b) / d
            let gp = if dap > 0.0 { (fa - features.get(p, k)) / dap } else { 0.0 };
            let gn = if dan > 0.0 { (fa - features.get(q, k)) / dan } else { 0.0 };
            let add = |m: &mut Matrix, r: usize, v: f64| {
                let cur = m.get(r, k);
                m.set(r, k, cur + v * inv);
            };
            add(&mut out.grad, a, gp - gn);
            add(&mut out.grad, p, -gp);
            add(&mut out.grad, q, gn);
        }
    }
    Ok(out)
}

/// [`triplet_reg_with_anchors`] with up to `max_anchors` anchors drawn uniformly
/// without replacement.
pub fn triplet_reg(
    features: &Matrix,
    labels: &[u32],
    margin: f64,
    max_anchors: usize,
    seed: u64,
) -> Result<LossOutput> {
    if max_anchors == 0 {
        return Err(Error::arg("max_anchors must be at least 1"));
    }
    let n = features.rows();
    let mut anchors = if n <= max_anchors {
        (0..n).collect()
    } else {
        sample(&mut seed::rng(seed), n, max_anchors).into_vec()
    };
    anchors.sort_unstable();
    triplet_reg_with_anchors(features, labels, &anchors, margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 1.0).abs() < 1e-12 && s.get(1, 1) < 1e-12);
        let s = softmax(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]));
        for (a, b) in s.row(0).iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((a - b).abs() < 5e-9);
        }
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        let l = ce_loss(&Matrix::from_rows(&[vec![0.0, 0.0]]), &[0]).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        let l = ce_loss(&Matrix::from_rows(&[vec![30.0, 0.0], vec![0.0, 30.0]]), &[0, 1]).unwrap();
        assert!(l.value < 1e-6);
        assert!(ce_loss(&Matrix::from_rows(&[vec![0.0, 0.0]]), &[2]).is_err());
    }

    #[test]
    fn sce_examples() {
        let p = SceParams::default();
        let l = sce_loss(&Matrix::from_rows(&[vec![0.0, 0.0]]), &[0], p).unwrap();
        assert!((l.value - (std::f64::consts::LN_2 + 3.0)).abs() < 1e-12);
        let l = sce_loss(&Matrix::from_rows(&[vec![800.0, 0.0]]), &[0], p).unwrap();
        assert_eq!(l.value, 0.0);
        let bad = SceParams { clip_log: 0.0, ..p };
        assert!(sce_loss(&Matrix::from_rows(&[vec![0.0, 0.0]]), &[0], bad).is_err());
    }

    #[test]
    fn sce_without_reverse_term_is_scaled_ce() {
        let z = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.5]]);
        let ce = ce_loss(&z, &[2, 0]).unwrap();
        let p = SceParams { alpha: 0.7, beta: 0.0, clip_log: -4.0 };
        let sce = sce_loss(&z, &[2, 0], p).unwrap();
        assert_eq!(sce.value, 0.7 * ce.value);
        let mut g = ce.grad.clone();
        g.scale(0.7);
        assert_eq!(sce.grad, g);
    }

    #[test]
    fn kd_examples() {
        let t = Matrix::from_rows(&[vec![50.0, -50.0]]);
        let s = Matrix::from_rows(&[vec![0.0, 0.0, 4.0]]);
        let l = kd_loss(&s, &t, &[0, 1], 1.0).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.grad.get(0, 2), 0.0);

        let t = Matrix::from_rows(&[vec![0.2, -0.4], vec![1.5, 0.1]]);
        let s = Matrix::from_rows(&[vec![0.2, -0.4, 3.0], vec![1.5, 0.1, -2.0]]);
        let l = kd_loss(&s, &t, &[0, 1], 1.0).unwrap();
        assert!((l.value - teacher_entropy(&t, 1.0)).abs() < 1e-12);
        assert!(l.grad.sum_sq().sqrt() <= 1e-10);
        assert!(kd_loss(&s, &t, &[0], 1.0).is_err());
        assert!(kd_loss(&s, &t, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn lovasz_examples() {
        let onehot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(lovasz_softmax_probs(&onehot, &[0, 1], None).unwrap().value, 0.0);
        let p = Matrix::from_rows(&[vec![0.4, 0.6], vec![0.6, 0.4]]);
        let l = lovasz_softmax_probs(&p, &[1, 0], Some(&[1])).unwrap();
        assert!((l.value - 0.4).abs() < 1e-15);
        let bad = Matrix::from_rows(&[vec![0.5, 0.6]]);
        assert!(lovasz_softmax_probs(&bad, &[0], None).is_err());
    }

    #[test]
    fn triplet_examples() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.5, 0.0]]);
        let l = triplet_reg_with_anchors(&f, &[0, 0, 1], &[0], 1.0).unwrap();
        assert!((l.value - 0.5).abs() < 1e-15);
        let l = triplet_reg(&f, &[4, 4, 4], 1.0, 50, 0).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad.sum_sq(), 0.0);
        let far = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.1, 0.0], vec![100.0, 0.0], vec![100.1, 0.0]]);
        assert_eq!(triplet_reg(&far, &[0, 0, 1, 1], 1.0, 50, 0).unwrap().value, 0.0);
    }
}
