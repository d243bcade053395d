// SPDX-License-Identifier: Apache-2.0

//! Azimuth sectors and grid-accelerated neighborhood statistics.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::linalg::Matrix;
use crate::pcio::PointCloud;
use crate::{Error, Result};

/// Columns of the per-point feature matrix.
pub const FEATURE_NAMES: [&str; 7] = [
    "x",
    "y",
    "z",
    "intensity",
    "range",
    "neighbor_count",
    "mean_knn_dist",
];
pub const FEATURE_DIM: usize = FEATURE_NAMES.len();

/// Counterclockwise angle from +x, in `[0, 2π)`. The origin maps to 0.
pub fn azimuth(x: f64, y: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        return 0.0;
    }
    let a = y.atan2(x);
    let a = if a < 0.0 { a + TAU } else { a };
    // -tiny + 2π rounds to 2π
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// Is `angle` inside the half-open sector `[start, start + width)` taken modulo 2π?
pub fn in_sector(angle: f64, start: f64, width: f64) -> bool {
    if width <= 0.0 {
        return false;
    }
    if width >= TAU {
        return true;
    }
    (angle - start).rem_euclid(TAU) < width
}

pub fn sector_mask(cloud: &PointCloud, start: f64, width: f64) -> Result<Vec<bool>> {
    if !(0.0..=TAU).contains(&width) {
        return Err(Error::arg(format!("sector width {width} outside [0, 2π]")));
    }
    if !start.is_finite() {
        return Err(Error::arg("sector start must be finite"));
    }
    Ok(cloud
        .points()
        .iter()
        .map(|p| in_sector(azimuth(p[0], p[1]), start, width))
        .collect())
}

type Cell = (i64, i64, i64);

/// Largest bounding box (in cells) stored densely.
const DENSE_LIMIT: i64 = 1 << 22;

#[derive(Debug, Clone)]
enum CellStore {
    /// Counting-sorted point ids; cell `c` owns `ids[starts[c]..starts[c + 1]]`.
    Dense { starts: Vec<u32>, ids: Vec<usize> },
    Sparse(HashMap<Cell, Vec<usize>>),
}

/// Points bucketed by `floor(xyz / cell)`.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: CellStore,
    n_points: usize,
    fingerprint: u64,
    min_cell: Cell,
    max_cell: Cell,
}

fn cloud_fingerprint(cloud: &PointCloud) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for p in cloud.points() {
        for v in &p[..3] {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl GridIndex {
    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn cell_of(&self, p: [f64; 3]) -> Cell {
        cell_of(p, self.cell)
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    /// Occupied cells with their point lists, sorted by cell coordinate.
    pub fn cells(&self) -> Vec<(Cell, &[usize])> {
        let mut v: Vec<_> = match &self.cells {
            CellStore::Dense { .. } => {
                let (lo, hi) = (self.min_cell, self.max_cell);
                let mut v = Vec::new();
                for x in lo.0..=hi.0 {
                    for y in lo.1..=hi.1 {
                        for z in lo.2..=hi.2 {
                            let pts = self.points_in((x, y, z));
                            if !pts.is_empty() {
                                v.push(((x, y, z), pts));
                            }
                        }
                    }
                }
                v
            }
            CellStore::Sparse(m) => m.iter().map(|(k, pts)| (*k, pts.as_slice())).collect(),
        };
        v.sort_by_key(|(k, _)| *k);
        v
    }

    pub fn points_in(&self, cell: Cell) -> &[usize] {
        match &self.cells {
            CellStore::Dense { starts, ids } => match self.linear(cell) {
                Some(l) => &ids[starts[l] as usize..starts[l + 1] as usize],
                None => &[],
            },
            CellStore::Sparse(m) => m.get(&cell).map_or(&[], Vec::as_slice),
        }
    }

    fn linear(&self, c: Cell) -> Option<usize> {
        let (lo, hi) = (self.min_cell, self.max_cell);
        if c.0 < lo.0 || c.1 < lo.1 || c.2 < lo.2 || c.0 > hi.0 || c.1 > hi.1 || c.2 > hi.2 {
            return None;
        }
        let (ny, nz) = (hi.1 - lo.1 + 1, hi.2 - lo.2 + 1);
        Some((((c.0 - lo.0) * ny + (c.1 - lo.1)) * nz + (c.2 - lo.2)) as usize)
    }

    fn max_ring(&self, from: Cell) -> i64 {
        let d = |lo: i64, hi: i64, c: i64| (c - lo).abs().max((hi - c).abs());
        d(self.min_cell.0, self.max_cell.0, from.0)
            .max(d(self.min_cell.1, self.max_cell.1, from.1))
            .max(d(self.min_cell.2, self.max_cell.2, from.2))
    }

    /// Visits every point whose cell lies on the Chebyshev shell of radius `ring`,
    /// skipping cells outside the occupied bounding box.
    fn for_each_in_ring(&self, center: Cell, ring: i64, mut f: impl FnMut(usize)) {
        let span = |c: i64, lo: i64, hi: i64| ((c - ring).max(lo), (c + ring).min(hi));
        let (x0, x1) = span(center.0, self.min_cell.0, self.max_cell.0);
        let (y0, y1) = span(center.1, self.min_cell.1, self.max_cell.1);
        let (z0, z1) = span(center.2, self.min_cell.2, self.max_cell.2);
        let mut visit = |c: Cell| {
            for &j in self.points_in(c) {
                f(j);
            }
        };
        for x in x0..=x1 {
            for y in y0..=y1 {
                let edge = (x - center.0).abs() == ring || (y - center.1).abs() == ring;
                if edge {
                    for z in z0..=z1 {
                        visit((x, y, z));
                    }
                } else {
                    // interior column: only the two z faces lie on the shell
                    if center.2 - ring >= z0 {
                        visit((x, y, center.2 - ring));
                    }
                    if ring > 0 && center.2 + ring <= z1 {
                        visit((x, y, center.2 + ring));
                    }
                }
            }
        }
    }
}

fn cell_of(p: [f64; 3], cell: f64) -> Cell {
    (
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    )
}

pub fn build_grid_index(cloud: &PointCloud, cell: f64) -> Result<GridIndex> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::arg(format!("grid cell size must be positive, got {cell}")));
    }
    let mut min_cell = (i64::MAX, i64::MAX, i64::MAX);
    let mut max_cell = (i64::MIN, i64::MIN, i64::MIN);
    let keys: Vec<Cell> = (0..cloud.len()).map(|i| cell_of(cloud.xyz(i), cell)).collect();
    for c in &keys {
        min_cell = (min_cell.0.min(c.0), min_cell.1.min(c.1), min_cell.2.min(c.2));
        max_cell = (max_cell.0.max(c.0), max_cell.1.max(c.1), max_cell.2.max(c.2));
    }
    let volume = [
        max_cell.0.saturating_sub(min_cell.0),
        max_cell.1.saturating_sub(min_cell.1),
        max_cell.2.saturating_sub(min_cell.2),
    ]
    .iter()
    .try_fold(1i64, |acc, &d| acc.checked_mul(d.checked_add(1)?));
    let mut index = GridIndex {
        cell,
        cells: CellStore::Sparse(HashMap::new()),
        n_points: cloud.len(),
        fingerprint: cloud_fingerprint(cloud),
        min_cell,
        max_cell,
    };
    if keys.is_empty() {
        return Ok(index);
    }
    match volume {
        Some(v) if v <= DENSE_LIMIT => {
            let lin: Vec<usize> = keys
                .iter()
                .map(|&c| index.linear(c).expect("inside the box"))
                .collect();
            let mut starts = vec![0u32; v as usize + 1];
            for &l in &lin {
                starts[l + 1] += 1;
            }
            for i in 0..v as usize {
                starts[i + 1] += starts[i];
            }
            let mut fill = starts.clone();
            let mut ids = vec![0; keys.len()];
            for (i, &l) in lin.iter().enumerate() {
                ids[fill[l] as usize] = i;
                fill[l] += 1;
            }
            index.cells = CellStore::Dense { starts, ids };
        }
        _ => {
            let mut m: HashMap<Cell, Vec<usize>> = HashMap::new();
            for (i, c) in keys.into_iter().enumerate() {
                m.entry(c).or_default().push(i);
            }
            index.cells = CellStore::Sparse(m);
        }
    }
    Ok(index)
}

#[inline]
pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Mean of the `k` smallest values (ascending summation). Sentinel when empty.
pub(crate) fn mean_of_smallest(mut d: Vec<f64>, k: usize, sentinel: f64) -> f64 {
    if d.is_empty() {
        return sentinel;
    }
    d.sort_by(f64::total_cmp);
    let take = k.min(d.len());
    let sum: f64 = d[..take].iter().sum();
    sum / take as f64
}

fn feature_row(cloud: &PointCloud, i: usize, count: usize, knn: f64) -> [f64; FEATURE_DIM] {
    let p = cloud.points()[i];
    let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0], p[1], p[2], p[3], range, count as f64, knn]
}

/// `(x, y, z, intensity, range, neighbor_count, mean_knn_dist)` per point.
///
/// `neighbor_count` counts other points within `radius` (inclusive); `mean_knn_dist`
/// averages the distances to the `k` nearest other points (fewer if the cloud is
/// smaller, `2 * radius` if the point is alone). Results equal a brute-force scan
/// exactly.
pub fn neighbor_features(
    cloud: &PointCloud,
    index: &GridIndex,
    radius: f64,
    k: usize,
) -> Result<Matrix> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::arg(format!("radius must be positive, got {radius}")));
    }
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if index.n_points != cloud.len() || index.fingerprint != cloud_fingerprint(cloud) {
        return Err(Error::arg("grid index was built from a different cloud"));
    }
    let sentinel = 2.0 * radius;
    // Rings needed so that every point within `radius` is visited.
    let radius_rings = (radius / index.cell).ceil() as i64;
    let rows: Vec<[f64; FEATURE_DIM]> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let pi = cloud.xyz(i);
            let center = index.cell_of(pi);
            let max_ring = index.max_ring(center);
            let mut dists: Vec<f64> = Vec::new();
            let mut ring = 0;
            loop {
                index.for_each_in_ring(center, ring, |j| {
                    if j != i {
                        dists.push(dist(pi, cloud.xyz(j)));
                    }
                });
                // Anything outside rings 0..=ring is farther than ring * cell.
                let bound = ring as f64 * index.cell;
                let knn_done = dists.len() >= k && {
                    let mut sorted = dists.clone();
                    sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
                    sorted[k - 1] <= bound
                };
                if (ring >= radius_rings && knn_done) || ring >= max_ring {
                    break;
                }
                ring += 1;
            }
            let count = dists.iter().filter(|&&d| d <= radius).count();
            feature_row(cloud, i, count, mean_of_smallest(dists, k, sentinel))
        })
        .collect();
    let mut m = Matrix::zeros(rows.len(), FEATURE_DIM);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(r);
    }
    Ok(m)
}

/// Grid with cell = radius, then [`neighbor_features`].
pub fn compute_features(cloud: &PointCloud, radius: f64, k: usize) -> Result<Matrix> {
    let index = build_grid_index(cloud, radius)?;
    neighbor_features(cloud, &index, radius, k)
}

/// O(N²) reference for [`neighbor_features`].
pub fn neighbor_features_brute_force(cloud: &PointCloud, radius: f64, k: usize) -> Matrix {
    let n = cloud.len();
    let mut m = Matrix::zeros(n, FEATURE_DIM);
    for i in 0..n {
        let pi = cloud.xyz(i);
        let d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist(pi, cloud.xyz(j)))
            .collect();
        let count = d.iter().filter(|&&v| v <= radius).count();
        let knn = mean_of_smallest(d, k, 2.0 * radius);
        m.row_mut(i).copy_from_slice(&feature_row(cloud, i, count, knn));
    }
    m
}
