// SPDX-License-Identifier: Apache-2.0

//! Confusion matrices, per-class IoU and mIoU.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How classes with zero union enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    /// Undefined classes are left out of the mean.
    #[default]
    Exclude,
    /// Undefined classes count as IoU 0.
    Zero,
}

/// `counts[t][p]`: points with truth `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, preds: &[u32], truth: &[u32]) -> Result<()> {
        if preds.len() != truth.len() {
            return Err(Error::arg(format!(
                "{} predictions vs {} labels",
                preds.len(),
                truth.len()
            )));
        }
        let n = self.n as u32;
        if let Some(bad) = preds.iter().chain(truth).find(|&&c| c >= n) {
            return Err(Error::arg(format!("class id {bad} out of range for {n} classes")));
        }
        for (&p, &t) in preds.iter().zip(truth) {
            self.counts[t as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::arg("cannot merge confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.n).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over `classes` (all classes when `None`). `None` if nothing is defined
    /// after filtering.
    pub fn miou(&self, classes: Option<&[u32]>, policy: AbsentClassPolicy) -> Option<f64> {
        let ious = self.iou_per_class();
        let picked: Vec<Option<f64>> = match classes {
            Some(f) => f
                .iter()
                .filter_map(|&c| ious.get(c as usize).copied())
                .collect(),
            None => ious,
        };
        if picked.iter().all(Option::is_none) {
            return None;
        }
        let vals: Vec<f64> = match policy {
            AbsentClassPolicy::Exclude => picked.into_iter().flatten().collect(),
            AbsentClassPolicy::Zero => picked.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
        };
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Convenience: confusion matrix for one prediction/label pair.
pub fn confusion(num_classes: usize, preds: &[u32], truth: &[u32]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(preds, truth)?;
    Ok(cm)
}
