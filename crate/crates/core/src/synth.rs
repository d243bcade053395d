// SPDX-License-Identifier: Apache-2.0

//! Procedural road scenes in good and adverse weather.
//!
//! Scenes are a straight road along +x with the sensor at the origin. Ground is a
//! ring of returns on the road plane, vehicles are box surfaces in the lanes,
//! structure is either tall building facades with roadside vegetation (urban, good
//! weather) or low guard rails (highway, adverse weather). Weather noise is spray
//! trailing each vehicle plus a diffuse shell of returns close to the sensor; it is
//! sparse and has almost no intensity.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pcio::{self, LabeledScan, PointCloud};
use crate::schema::ClassSchema;
use crate::seed;
use crate::{Error, Result};

pub use crate::schema::ClassDef;

pub const GROUND_Z: f64 = -1.7;

pub const GROUND: u32 = 0;
pub const VEHICLE: u32 = 1;
pub const STRUCTURE: u32 = 2;
pub const WEATHER_NOISE: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenParams {
    pub points_per_scan: usize,
    /// Fractions of the scan; ground takes whatever is left.
    pub vehicle_fraction: f64,
    pub structure_fraction: f64,
    pub novel_fraction: f64,
    pub vehicle_count: usize,
    pub noise_cluster_count: usize,
    /// Standard deviation of a spray blob, meters.
    pub noise_sigma: f64,
    /// Share of noise points spread diffusely around the sensor instead of trailing vehicles.
    pub noise_diffuse_share: f64,
    /// Per-scan multiplicative spread of `noise_sigma`: the blob std is drawn from
    /// `noise_sigma * [1 - v, 1 + v]`.
    pub noise_variability: f64,
    pub noise_intensity_max: f64,
    pub sensor_range: f64,
    /// Share of structure points drawn as roadside vegetation clumps.
    pub vegetation_share: f64,
    /// Lateral distance range of structure walls, meters.
    pub wall_distance: [f64; 2],
    pub wall_height: f64,
    /// Multiplier on surface intensities (wet surfaces return less).
    pub surface_reflectance: f64,
}

impl SceneGenParams {
    pub fn good_weather() -> Self {
        SceneGenParams {
            points_per_scan: 768,
            vehicle_fraction: 0.25,
            structure_fraction: 0.3,
            novel_fraction: 0.0,
            vehicle_count: 6,
            noise_cluster_count: 0,
            noise_sigma: 0.5,
            noise_diffuse_share: 0.0,
            noise_variability: 0.0,
            noise_intensity_max: 0.1,
            sensor_range: 40.0,
            vegetation_share: 0.4,
            wall_distance: [12.0, 16.0],
            wall_height: 6.0,
            surface_reflectance: 1.0,
        }
    }

    pub fn adverse_weather() -> Self {
        SceneGenParams {
            novel_fraction: 0.15,
            noise_cluster_count: 6,
            noise_sigma: 0.5,
            noise_diffuse_share: 0.35,
            noise_variability: 0.6,
            structure_fraction: 0.2,
            vegetation_share: 0.0,
            wall_distance: [7.5, 9.0],
            wall_height: 0.9,
            surface_reflectance: 0.7,
            ..SceneGenParams::good_weather()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [
            ("vehicle_fraction", self.vehicle_fraction),
            ("structure_fraction", self.structure_fraction),
            ("novel_fraction", self.novel_fraction),
            ("noise_diffuse_share", self.noise_diffuse_share),
            ("vegetation_share", self.vegetation_share),
            ("noise_variability", self.noise_variability),
        ];
        for (name, f) in fr {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::arg(format!("{name} = {f} outside [0, 1]")));
            }
        }
        if self.vehicle_fraction + self.structure_fraction + self.novel_fraction > 1.0 + 1e-12 {
            return Err(Error::arg("class fractions sum above 1"));
        }
        if self.points_per_scan == 0 {
            return Err(Error::arg("points_per_scan must be at least 1"));
        }
        let counts = self.class_counts();
        if counts.iter().sum::<usize>() != self.points_per_scan {
            return Err(Error::arg("rounded class counts exceed points_per_scan"));
        }
        if counts[VEHICLE as usize] > 0 && self.vehicle_count == 0 {
            return Err(Error::arg("vehicle points requested but vehicle_count = 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.sensor_range > 10.0 && self.wall_height > 0.0) {
            return Err(Error::arg("noise_sigma >= 0, sensor_range > 10, wall_height > 0 required"));
        }
        if !(self.wall_distance[0] > 0.0 && self.wall_distance[0] <= self.wall_distance[1]) {
            return Err(Error::arg("wall_distance must be an ordered positive range"));
        }
        if !(self.noise_intensity_max >= 0.0 && self.surface_reflectance >= 0.0) {
            return Err(Error::arg("intensities must be non-negative"));
        }
        Ok(())
    }

    /// Points per class `[ground, vehicle, structure, noise]`, each rounded from its
    /// fraction with ground taking the remainder.
    pub fn class_counts(&self) -> [usize; 4] {
        let n = self.points_per_scan;
        let r = |f: f64| (f * n as f64).round() as usize;
        let (v, s, z) = (
            r(self.vehicle_fraction),
            r(self.structure_fraction),
            r(self.novel_fraction),
        );
        [n.saturating_sub(v + s + z), v, s, z]
    }
}

struct Vehicle {
    center: [f64; 2],
    half: [f64; 3],
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

fn place_vehicles(p: &SceneGenParams, rng: &mut ChaCha8Rng) -> Vec<Vehicle> {
    const LANES: [f64; 4] = [-5.25, -1.75, 1.75, 5.25];
    let max_x = (0.6 * p.sensor_range).max(10.0);
    // Alternate ahead/behind so vehicles surround the sensor.
    (0..p.vehicle_count)
        .map(|v| {
            let lane = LANES[rng.random_range(0..LANES.len())];
            let dist = uniform(rng, 6.0, max_x);
            let x = if v % 2 == 0 { dist } else { -dist };
            let y = lane + uniform(rng, -0.3, 0.3);
            Vehicle {
                center: [x, y],
                half: [
                    uniform(rng, 1.9, 2.4),
                    uniform(rng, 0.85, 1.0),
                    uniform(rng, 0.7, 0.85),
                ],
            }
        })
        .collect()
}

fn vehicle_surface(v: &Vehicle, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let [hx, hy, hz] = v.half;
    let bottom = GROUND_Z + 0.25;
    let cz = bottom + hz;
    // faces: top, +-x, +-y, weighted by area
    let areas = [4.0 * hx * hy, 4.0 * hy * hz, 4.0 * hy * hz, 4.0 * hx * hz, 4.0 * hx * hz];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut face = 0;
    while face < areas.len() - 1 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let (u, w) = (uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
    let local = match face {
        0 => [u * hx, w * hy, hz],
        1 => [hx, u * hy, w * hz],
        2 => [-hx, u * hy, w * hz],
        3 => [u * hx, hy, w * hz],
        _ => [u * hx, -hy, w * hz],
    };
    [v.center[0] + local[0], v.center[1] + local[1], cz + local[2]]
}

/// Deterministic scene for `(params, scan_seed)` with exactly `points_per_scan` points.
pub fn gen_scene(params: &SceneGenParams, scan_seed: u64) -> Result<LabeledScan> {
    params.validate()?;
    let mut rng = seed::rng(scan_seed);
    let p = params;
    let [n_ground, n_vehicle, n_structure, n_noise] = p.class_counts();
    let refl = p.surface_reflectance;
    let mut pts: Vec<[f64; 4]> = Vec::with_capacity(p.points_per_scan);
    let mut labels: Vec<u32> = Vec::with_capacity(p.points_per_scan);
    let jitter = Normal::new(0.0, 0.03).expect("valid std");

    // Ground: density falls off as 1/r like a spinning sensor.
    for _ in 0..n_ground {
        let r = uniform(&mut rng, 2.5, p.sensor_range);
        let a = uniform(&mut rng, 0.0, TAU);
        let z = GROUND_Z + jitter.sample(&mut rng) * 0.5;
        let i = refl * uniform(&mut rng, 0.15, 0.35);
        pts.push([r * a.cos(), r * a.sin(), z, i]);
        labels.push(GROUND);
    }

    let vehicles = place_vehicles(p, &mut rng);
    for (v, count) in vehicles.iter().zip(split_evenly(n_vehicle, vehicles.len())) {
        let base_i = uniform(&mut rng, 0.45, 0.85);
        for _ in 0..count {
            let xyz = vehicle_surface(v, &mut rng);
            let i = refl * (base_i + uniform(&mut rng, -0.1, 0.1)).clamp(0.0, 1.0);
            pts.push([xyz[0], xyz[1], xyz[2], i]);
            labels.push(VEHICLE);
        }
    }

    let n_veg = (p.vegetation_share * n_structure as f64).round() as usize;
    let n_wall = n_structure - n_veg;
    let half_len = 0.75 * p.sensor_range;
    let walls = [
        uniform(&mut rng, p.wall_distance[0], p.wall_distance[1]),
        -uniform(&mut rng, p.wall_distance[0], p.wall_distance[1]),
    ];
    for (side, count) in split_evenly(n_wall, 2).into_iter().enumerate() {
        let y0 = walls[side];
        for _ in 0..count {
            let x = uniform(&mut rng, -half_len, half_len);
            let z = GROUND_Z + uniform(&mut rng, 0.0, p.wall_height);
            let i = refl * uniform(&mut rng, 0.3, 0.6);
            pts.push([x, y0 + jitter.sample(&mut rng), z, i]);
            labels.push(STRUCTURE);
        }
    }
    if n_veg > 0 {
        let clumps = 6;
        let spread = Normal::new(0.0, 0.6).expect("valid std");
        let centers: Vec<[f64; 3]> = (0..clumps)
            .map(|c| {
                let side = if c % 2 == 0 { 1.0 } else { -1.0 };
                [
                    uniform(&mut rng, -half_len * 0.8, half_len * 0.8),
                    side * uniform(&mut rng, 8.0, 11.0),
                    GROUND_Z + uniform(&mut rng, 0.6, 1.6),
                ]
            })
            .collect();
        for (c, count) in centers.iter().zip(split_evenly(n_veg, clumps)) {
            for _ in 0..count {
                let z = (c[2] + spread.sample(&mut rng) * 0.6).max(GROUND_Z + 0.05);
                let i = refl * uniform(&mut rng, 0.05, 0.25);
                pts.push([c[0] + spread.sample(&mut rng), c[1] + spread.sample(&mut rng), z, i]);
                labels.push(STRUCTURE);
            }
        }
    }

    if n_noise > 0 {
        let severity = uniform(&mut rng, 1.0 - p.noise_variability, 1.0 + p.noise_variability);
        let sigma = (p.noise_sigma * severity).max(1e-3);
        let blob = Normal::new(0.0, sigma).expect("valid std");
        let imax = p.noise_intensity_max * uniform(&mut rng, 0.5, 1.0);
        let n_diffuse = if p.noise_cluster_count == 0 || vehicles.is_empty() {
            n_noise
        } else {
            (p.noise_diffuse_share * n_noise as f64).round() as usize
        };
        let n_spray = n_noise - n_diffuse;
        let clusters = p.noise_cluster_count.min(vehicles.len());
        for (c, count) in split_evenly(n_spray, clusters).into_iter().enumerate() {
            let v = &vehicles[c];
            // trailing the vehicle, on the far side from the sensor
            let dir = v.center[0].signum();
            let cx = v.center[0] + dir * (v.half[0] + 1.0 + sigma);
            let cy = v.center[1];
            for _ in 0..count {
                let z = (GROUND_Z + 0.6 + blob.sample(&mut rng) * 0.6).max(GROUND_Z + 0.05);
                let i = uniform(&mut rng, 0.0, imax);
                pts.push([cx + blob.sample(&mut rng) * 1.5, cy + blob.sample(&mut rng), z, i]);
                labels.push(WEATHER_NOISE);
            }
        }
        for _ in 0..n_diffuse {
            let r = uniform(&mut rng, 1.5, 6.0);
            let a = uniform(&mut rng, 0.0, TAU);
            let z = GROUND_Z + uniform(&mut rng, 0.2, 2.2);
            let i = uniform(&mut rng, 0.0, imax);
            pts.push([r * a.cos(), r * a.sin(), z, i]);
            labels.push(WEATHER_NOISE);
        }
    }

    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.shuffle(&mut rng);
    let cloud = PointCloud::new(order.iter().map(|&i| pts[i]).collect())?;
    let labels = order.iter().map(|&i| labels[i]).collect();
    LabeledScan::new(cloud, labels)
}

/// The three training pools: labeled good-weather scans, `K` labeled adverse shots and
/// unlabeled adverse scans.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub source: Vec<LabeledScan>,
    pub target_labeled: Vec<LabeledScan>,
    pub target_unlabeled: Vec<PointCloud>,
    pub k: usize,
}

impl DatasetSplit {
    pub fn validate(&self, schema: &ClassSchema) -> Result<()> {
        if self.target_labeled.len() != self.k {
            return Err(Error::Data(format!(
                "expected {} labeled target scans, found {}",
                self.k,
                self.target_labeled.len()
            )));
        }
        for (i, s) in self.source.iter().enumerate() {
            s.validate(schema)?;
            if s.labels.iter().any(|&l| schema.is_novel(l)) {
                return Err(Error::Data(format!("source scan {i} contains novel labels")));
            }
        }
        for s in &self.target_labeled {
            s.validate(schema)?;
        }
        Ok(())
    }
}

fn gen_many(params: &SceneGenParams, n: usize, seed: u64, tag: &str) -> Result<Vec<LabeledScan>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| gen_scene(params, seed::derive(seed, tag, i as u64)))
        .collect()
}

/// Generates `n_target_unlabeled + k` adverse scans and labels the first `k` that
/// contain weather noise; the rest become the unlabeled pool.
pub fn gen_split(
    params_good: &SceneGenParams,
    params_adverse: &SceneGenParams,
    n_source: usize,
    n_target_unlabeled: usize,
    k: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    let mut good = params_good.clone();
    good.novel_fraction = 0.0;
    let source = gen_many(&good, n_source, seed, "source")?;
    let pool = gen_many(params_adverse, n_target_unlabeled + k, seed, "target")?;
    let mut target_labeled = Vec::with_capacity(k);
    let mut target_unlabeled = Vec::with_capacity(n_target_unlabeled);
    for scan in pool {
        if target_labeled.len() < k && scan.labels.contains(&WEATHER_NOISE) {
            target_labeled.push(scan);
        } else {
            target_unlabeled.push(scan.cloud);
        }
    }
    if target_labeled.len() < k {
        return Err(Error::arg(format!(
            "K = {k} exceeds the {} target scans containing weather noise",
            target_labeled.len()
        )));
    }
    Ok(DatasetSplit {
        source,
        target_labeled,
        target_unlabeled,
        k,
    })
}

/// Held-out labeled test scans for both domains, from seed streams disjoint from
/// [`gen_split`].
pub fn gen_test_sets(
    params_good: &SceneGenParams,
    params_adverse: &SceneGenParams,
    n_source: usize,
    n_target: usize,
    seed: u64,
) -> Result<(Vec<LabeledScan>, Vec<LabeledScan>)> {
    let mut good = params_good.clone();
    good.novel_fraction = 0.0;
    Ok((
        gen_many(&good, n_source, seed, "test-source")?,
        gen_many(params_adverse, n_target, seed, "test-target")?,
    ))
}

// --- on-disk layout -------------------------------------------------------------
//
// {root}/dataset.toml
// {root}/{split}/velodyne/{index:06}.bin
// {root}/{split}/labels/{index:06}.label     (absent for target_unlabeled)

pub const DATASET_MANIFEST: &str = "dataset.toml";
pub const SPLIT_SOURCE: &str = "source";
pub const SPLIT_TARGET_LABELED: &str = "target_labeled";
pub const SPLIT_TARGET_UNLABELED: &str = "target_unlabeled";
pub const SPLIT_TEST_SOURCE: &str = "test_source";
pub const SPLIT_TEST_TARGET: &str = "test_target";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub k: usize,
    pub n_source: usize,
    pub n_target_unlabeled: usize,
    pub n_test_source: usize,
    pub n_test_target: usize,
    pub schema: ClassSchema,
    pub good_weather: SceneGenParams,
    pub adverse_weather: SceneGenParams,
}

impl DatasetManifest {
    /// Loads `{root}/dataset.toml`.
    pub fn load(root: &Path) -> Result<Self> {
        Self::load_file(&root.join(DATASET_MANIFEST))
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

fn scan_path(root: &Path, split: &str, i: usize) -> PathBuf {
    root.join(split).join("velodyne").join(format!("{i:06}.bin"))
}

fn label_path(root: &Path, split: &str, i: usize) -> PathBuf {
    root.join(split).join("labels").join(format!("{i:06}.label"))
}

fn mkdirs(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_labeled_split(
    root: &Path,
    split: &str,
    scans: &[LabeledScan],
    schema: &ClassSchema,
) -> Result<()> {
    mkdirs(&root.join(split).join("velodyne"))?;
    mkdirs(&root.join(split).join("labels"))?;
    for (i, s) in scans.iter().enumerate() {
        pcio::write_scan(&s.cloud, scan_path(root, split, i))?;
        pcio::write_labels(&s.labels, schema, label_path(root, split, i))?;
    }
    Ok(())
}

pub fn write_cloud_split(root: &Path, split: &str, clouds: &[PointCloud]) -> Result<()> {
    mkdirs(&root.join(split).join("velodyne"))?;
    for (i, c) in clouds.iter().enumerate() {
        pcio::write_scan(c, scan_path(root, split, i))?;
    }
    Ok(())
}

fn count_files(dir: &Path, ext: &str) -> Result<usize> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().and_then(|e| e.to_str()) == Some(ext) {
            n += 1;
        }
    }
    Ok(n)
}

/// Reads `{dir}/velodyne/*.bin` in index order.
pub fn read_cloud_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let n = count_files(&dir.join("velodyne"), "bin")?;
    (0..n)
        .map(|i| pcio::read_scan(dir.join("velodyne").join(format!("{i:06}.bin"))))
        .collect()
}

/// Reads `{dir}/velodyne/*.bin` with the matching `{dir}/labels/*.label`.
pub fn read_labeled_dir(dir: &Path, schema: &ClassSchema) -> Result<Vec<LabeledScan>> {
    let n = count_files(&dir.join("velodyne"), "bin")?;
    (0..n)
        .map(|i| {
            pcio::read_labeled_scan(
                dir.join("velodyne").join(format!("{i:06}.bin")),
                dir.join("labels").join(format!("{i:06}.label")),
                schema,
            )
        })
        .collect()
}

pub fn read_labeled_split(root: &Path, split: &str, schema: &ClassSchema) -> Result<Vec<LabeledScan>> {
    read_labeled_dir(&root.join(split), schema)
}

pub fn read_cloud_split(root: &Path, split: &str) -> Result<Vec<PointCloud>> {
    read_cloud_dir(&root.join(split))
}

/// Default experiment sizes: 200 source, 200 unlabeled, `K` shots, 100 test scans
/// per domain.
impl DatasetManifest {
    pub fn with_defaults(seed: u64, k: usize) -> Self {
        DatasetManifest {
            seed,
            k,
            n_source: 200,
            n_target_unlabeled: 200,
            n_test_source: 100,
            n_test_target: 100,
            schema: ClassSchema::default_weather(),
            good_weather: SceneGenParams::good_weather(),
            adverse_weather: SceneGenParams::adverse_weather(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.good_weather.validate()?;
        self.adverse_weather.validate()?;
        if self.n_source == 0 {
            return Err(Error::arg("n_source must be at least 1"));
        }
        Ok(())
    }
}

/// Everything a manifest describes, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: DatasetSplit,
    pub test_source: Vec<LabeledScan>,
    pub test_target: Vec<LabeledScan>,
}

pub fn generate_dataset(m: &DatasetManifest) -> Result<Dataset> {
    m.validate()?;
    let split = gen_split(
        &m.good_weather,
        &m.adverse_weather,
        m.n_source,
        m.n_target_unlabeled,
        m.k,
        m.seed,
    )?;
    let (test_source, test_target) = gen_test_sets(
        &m.good_weather,
        &m.adverse_weather,
        m.n_test_source,
        m.n_test_target,
        m.seed,
    )?;
    Ok(Dataset {
        split,
        test_source,
        test_target,
    })
}

/// Writes the manifest and all five splits under `root`.
pub fn write_dataset(root: &Path, m: &DatasetManifest, data: &Dataset) -> Result<PathBuf> {
    mkdirs(root)?;
    write_labeled_split(root, SPLIT_SOURCE, &data.split.source, &m.schema)?;
    write_labeled_split(root, SPLIT_TARGET_LABELED, &data.split.target_labeled, &m.schema)?;
    write_cloud_split(root, SPLIT_TARGET_UNLABELED, &data.split.target_unlabeled)?;
    write_labeled_split(root, SPLIT_TEST_SOURCE, &data.test_source, &m.schema)?;
    write_labeled_split(root, SPLIT_TEST_TARGET, &data.test_target, &m.schema)?;
    let path = root.join(DATASET_MANIFEST);
    fs::write(&path, m.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads the training pools back; the split is checked against the manifest.
pub fn read_split(root: &Path) -> Result<(DatasetManifest, DatasetSplit)> {
    let m = DatasetManifest::load(root)?;
    let split = DatasetSplit {
        source: read_labeled_split(root, SPLIT_SOURCE, &m.schema)?,
        target_labeled: read_labeled_split(root, SPLIT_TARGET_LABELED, &m.schema)?,
        target_unlabeled: read_cloud_split(root, SPLIT_TARGET_UNLABELED)?,
        k: m.k,
    };
    split.validate(&m.schema)?;
    Ok((m, split))
}
