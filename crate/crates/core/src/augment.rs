// SPDX-License-Identifier: Apache-2.0

//! Scan augmentation, polar mixing and pseudo-validation sets.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::sector_mask;
use crate::pcio::LabeledScan;
use crate::schema::ClassSchema;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Rotation about z, radians.
    pub rotation: [f64; 2],
    pub scale: [f64; 2],
    pub intensity_scale: [f64; 2],
    /// Std of the xyz jitter applied to weather-noise points, meters.
    pub jitter_std: f64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            flip_x: true,
            flip_y: true,
            rotation: [-FRAC_PI_4, FRAC_PI_4],
            scale: [0.9, 1.1],
            intensity_scale: [0.9, 1.0],
            jitter_std: 0.3,
        }
    }
}

impl AugmentationParams {
    /// Leaves every scan untouched.
    pub fn identity() -> Self {
        AugmentationParams {
            flip_x: false,
            flip_y: false,
            rotation: [0.0, 0.0],
            scale: [1.0, 1.0],
            intensity_scale: [1.0, 1.0],
            jitter_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("intensity_scale", self.intensity_scale),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::arg(format!("{name} range [{lo}, {hi}] is not ordered")));
            }
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::arg("jitter_std must be >= 0"));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Flips, rotation about z, global scale, intensity scale (clamped to `[0, 1]`), then
/// Gaussian xyz jitter on weather-noise points only. Labels are untouched.
pub fn augment_scan(
    scan: &LabeledScan,
    params: &AugmentationParams,
    schema: &ClassSchema,
    draw_seed: u64,
) -> LabeledScan {
    let mut rng = seed::rng(draw_seed);
    let flip_x = rng.random::<f64>() < 0.5 && params.flip_x;
    let flip_y = rng.random::<f64>() < 0.5 && params.flip_y;
    let angle = draw(&mut rng, params.rotation);
    let scale = draw(&mut rng, params.scale);
    let iscale = draw(&mut rng, params.intensity_scale);
    let (s, c) = angle.sin_cos();

    let mut out = scan.clone();
    out.cloud.map_points(|_, p| {
        let mut x = p[0];
        let mut y = p[1];
        if flip_x {
            x = -x;
        }
        if flip_y {
            y = -y;
        }
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        p[0] = rx * scale;
        p[1] = ry * scale;
        p[2] *= scale;
        p[3] = (p[3] * iscale).clamp(0.0, 1.0);
    });
    if params.jitter_std > 0.0 {
        let noise = Normal::new(0.0, params.jitter_std).expect("validated std");
        let labels = &scan.labels;
        out.cloud.map_points(|i, p| {
            if schema.is_novel(labels[i]) {
                p[0] += noise.sample(&mut rng);
                p[1] += noise.sample(&mut rng);
                p[2] += noise.sample(&mut rng);
            }
        });
    }
    out
}

/// Indices kept by [`polar_mix`]: points of `a` inside the sector and points of `b`
/// outside it.
pub fn polar_mix_selection(
    a: &LabeledScan,
    b: &LabeledScan,
    theta: f64,
    start: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(theta > 0.0 && theta < TAU) {
        return Err(Error::arg(format!("mixing angle {theta} outside (0, 2π)")));
    }
    let ma = sector_mask(&a.cloud, start, theta)?;
    let mb = sector_mask(&b.cloud, start, theta)?;
    Ok((
        (0..a.len()).filter(|&i| ma[i]).collect(),
        (0..b.len()).filter(|&i| !mb[i]).collect(),
    ))
}

/// The sector `[start, start + theta)` of `a` inserted into `b`. Points of `a` come
/// first; each group keeps its original order.
pub fn polar_mix(a: &LabeledScan, b: &LabeledScan, theta: f64, start: f64) -> Result<LabeledScan> {
    let (ia, ib) = polar_mix_selection(a, b, theta, start)?;
    let pa = a.select(&ia);
    let pb = b.select(&ib);
    let mut labels = pa.labels;
    labels.extend(pb.labels);
    LabeledScan::new(pa.cloud.concat(&pb.cloud), labels)
}

/// Sector of scan `i` for sorted `boundaries`: scan 0 takes the wrapped sector from the
/// last boundary to the first, scan `i > 0` takes `[b[i-1], b[i])`.
fn multi_sectors(boundaries: &[f64]) -> Vec<(f64, f64)> {
    let n = boundaries.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (boundaries[n - 1], boundaries[0] + TAU - boundaries[n - 1])
            } else {
                (boundaries[i - 1], boundaries[i] - boundaries[i - 1])
            }
        })
        .collect()
}

/// Widths of the sectors used by [`polar_mix_multi_with_boundaries`].
pub fn multi_sector_widths(boundaries: &[f64]) -> Vec<f64> {
    let mut b = boundaries.to_vec();
    b.sort_by(f64::total_cmp);
    multi_sectors(&b).into_iter().map(|(_, w)| w).collect()
}

pub fn polar_mix_multi_with_boundaries(
    scans: &[LabeledScan],
    boundaries: &[f64],
) -> Result<LabeledScan> {
    if scans.len() < 2 {
        return Err(Error::arg("multi-scan polar mix needs at least 2 scans"));
    }
    if boundaries.len() != scans.len() {
        return Err(Error::arg("need one boundary per scan"));
    }
    if boundaries.iter().any(|b| !(0.0..TAU).contains(b)) {
        return Err(Error::arg("boundaries must lie in [0, 2π)"));
    }
    let mut b = boundaries.to_vec();
    b.sort_by(f64::total_cmp);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (scan, (start, width)) in scans.iter().zip(multi_sectors(&b)) {
        let mask = sector_mask(&scan.cloud, start, width.clamp(0.0, TAU))?;
        for (i, keep) in mask.into_iter().enumerate() {
            if keep {
                points.push(scan.cloud.points()[i]);
                labels.push(scan.labels[i]);
            }
        }
    }
    LabeledScan::new(crate::pcio::PointCloud::new(points)?, labels)
}

/// Partitions the circle into one contiguous sector per scan at uniformly drawn
/// boundaries and takes sector `i` from scan `i`.
pub fn polar_mix_multi(scans: &[LabeledScan], seed: u64) -> Result<LabeledScan> {
    let mut rng = seed::rng(seed);
    let boundaries: Vec<f64> = (0..scans.len()).map(|_| rng.random::<f64>() * TAU).collect();
    polar_mix_multi_with_boundaries(scans, &boundaries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoValStage {
    StageOne,
    StageTwo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoValSet {
    pub scans: Vec<LabeledScan>,
    pub stage: PseudoValStage,
}

impl PseudoValSet {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

/// Shots per multi-scan mix in the stage-one set.
pub const STAGE_ONE_MIX_WIDTH: usize = 4;

/// Each scan mixes `min(K, 4)` independently augmented shots (drawn with replacement
/// when `K < 4`).
pub fn build_pseudoval_stage1(
    shots: &[LabeledScan],
    size: usize,
    params: &AugmentationParams,
    schema: &ClassSchema,
    seed: u64,
) -> Result<PseudoValSet> {
    if shots.is_empty() {
        return Err(Error::arg("pseudo-validation needs at least one labeled shot"));
    }
    params.validate()?;
    let k = shots.len();
    let m = k.min(STAGE_ONE_MIX_WIDTH).max(2);
    let scans = (0..size)
        .into_par_iter()
        .map(|j| {
            let mut rng = seed::stream(seed, "pseudoval-1", j as u64);
            let picks: Vec<usize> = if k >= STAGE_ONE_MIX_WIDTH {
                sample(&mut rng, k, m).into_vec()
            } else {
                (0..m).map(|_| rng.random_range(0..k)).collect()
            };
            let augmented: Vec<LabeledScan> = picks
                .iter()
                .map(|&s| augment_scan(&shots[s], params, schema, rng.random()))
                .collect();
            polar_mix_multi(&augmented, rng.random())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoValSet {
        scans,
        stage: PseudoValStage::StageOne,
    })
}

/// Range of the sector angle taken from the augmented shot in stage-two mixes.
pub const STAGE_TWO_THETA: [f64; 2] = [FRAC_PI_2, 3.0 * FRAC_PI_2];

/// Each scan inserts a sector of one augmented shot, `θ ~ U(π/2, 3π/2)`, into one
/// uniformly drawn source scan.
pub fn build_pseudoval_stage2(
    shots: &[LabeledScan],
    source: &[LabeledScan],
    size: usize,
    params: &AugmentationParams,
    schema: &ClassSchema,
    seed: u64,
) -> Result<PseudoValSet> {
    if shots.is_empty() || source.is_empty() {
        return Err(Error::arg("stage-two pseudo-validation needs shots and source scans"));
    }
    params.validate()?;
    let scans = (0..size)
        .into_par_iter()
        .map(|j| {
            let mut rng = seed::stream(seed, "pseudoval-2", j as u64);
            let shot = &shots[rng.random_range(0..shots.len())];
            let src = &source[rng.random_range(0..source.len())];
            let aug = augment_scan(shot, params, schema, rng.random());
            let theta = draw(&mut rng, STAGE_TWO_THETA);
            let start = rng.random::<f64>() * TAU;
            polar_mix(&aug, src, theta, start)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoValSet {
        scans,
        stage: PseudoValStage::StageTwo,
    })
}

/// Uniform angle in the open interval `(0, 2π)` for training-time mixing.
pub(crate) fn draw_open_angle(rng: &mut impl Rng) -> f64 {
    loop {
        let t = rng.random::<f64>() * TAU;
        if t > 0.0 {
            return t;
        }
    }
}
