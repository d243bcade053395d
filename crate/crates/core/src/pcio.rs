// SPDX-License-Identifier: Apache-2.0

//! KITTI-style scan and label files.
//!
//! ```text
//! scan:   [x:f32le][y:f32le][z:f32le][intensity:f32le] * N      (16 bytes / point)
//! labels: [instance:u16 | semantic:u16] as u32le * N              (semantic = low 16 bits)
//! ```
//!
//! Points are held as `f64` in memory; quantization to `f32` happens on write only.

use std::fs;
use std::path::Path;

use crate::schema::ClassSchema;
use crate::{Error, Result};

pub const POINT_RECORD_BYTES: usize = 16;

/// One sweep: rows of `(x, y, z, intensity)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 4]>,
}

/// Per-point contiguous class ids.
pub type LabelVec = Vec<u32>;

impl PointCloud {
    /// Fails with a data error naming the first non-finite point.
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("point {i} has a non-finite value")));
        }
        Ok(PointCloud { points })
    }

    pub fn empty() -> Self {
        PointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 4]] {
        &self.points
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0], p[1], p[2]]
    }

    /// Apply `f` to every point. The result must stay finite; callers in this crate
    /// only apply rigid transforms, scalings and finite noise.
    pub(crate) fn map_points(&mut self, mut f: impl FnMut(usize, &mut [f64; 4])) {
        for (i, p) in self.points.iter_mut().enumerate() {
            f(i, p);
        }
        debug_assert!(self.points.iter().flatten().all(|v| v.is_finite()));
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    /// Values rounded through `f32`, i.e. what a write/read cycle yields.
    pub fn quantized(&self) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| p.map(|v| f64::from(v as f32)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan {
    pub cloud: PointCloud,
    pub labels: LabelVec,
}

impl LabeledScan {
    pub fn new(cloud: PointCloud, labels: LabelVec) -> Result<Self> {
        if cloud.len() != labels.len() {
            return Err(Error::Data(format!(
                "cloud has {} points but {} labels",
                cloud.len(),
                labels.len()
            )));
        }
        Ok(LabeledScan { cloud, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledScan {
        LabeledScan {
            cloud: self.cloud.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Checks every label against the schema.
    pub fn validate(&self, schema: &ClassSchema) -> Result<()> {
        let n = schema.num_classes() as u32;
        if let Some(i) = self.labels.iter().position(|&l| l >= n) {
            return Err(Error::Data(format!(
                "label {} at point {i} outside schema of {n} classes",
                self.labels[i]
            )));
        }
        Ok(())
    }
}

pub fn decode_scan(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % POINT_RECORD_BYTES) as u64,
            format!(
                "length {} is not a multiple of {POINT_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let mut p = [0.0f64; 4];
        for (k, word) in rec.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(word.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: point {i} has a non-finite value (byte {})",
                    path.display(),
                    i * POINT_RECORD_BYTES + k * 4
                )));
            }
            p[k] = f64::from(v);
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_RECORD_BYTES);
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes, path)
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scan(cloud)).map_err(|e| Error::io(path, e))
}

pub fn decode_labels(bytes: &[u8], schema: &ClassSchema, path: &Path) -> Result<LabelVec> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % 4) as u64,
            "label file length is not a multiple of 4",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|w| {
            let word = u32::from_le_bytes(w.try_into().expect("4-byte chunk"));
            schema.map_raw((word & 0xffff) as u16)
        })
        .collect())
}

pub fn read_labels(path: impl AsRef<Path>, schema: &ClassSchema) -> Result<LabelVec> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, schema, path)
}

/// Contiguous ids are written as the schema's raw ids with instance id 0.
pub fn encode_labels(labels: &[u32], schema: &ClassSchema) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for (i, &l) in labels.iter().enumerate() {
        let raw = schema
            .raw_of(l)
            .ok_or_else(|| Error::Data(format!("label {l} at point {i} not in schema")))?;
        out.extend_from_slice(&u32::from(raw).to_le_bytes());
    }
    Ok(out)
}

pub fn write_labels(labels: &[u32], schema: &ClassSchema, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_labels(labels, schema)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_labeled_scan(
    scan: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    schema: &ClassSchema,
) -> Result<LabeledScan> {
    let cloud = read_scan(scan.as_ref())?;
    let labels_vec = read_labels(labels.as_ref(), schema)?;
    LabeledScan::new(cloud, labels_vec).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!(
            "{} / {}: {m}",
            scan.as_ref().display(),
            labels.as_ref().display()
        )),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let d = tmp();
        let p = d.path().join("e.bin");
        std::fs::write(&p, b"").unwrap();
        assert_eq!(read_scan(&p).unwrap().len(), 0);
    }

    #[test]
    fn reads_handmade_buffer() {
        let mut buf = Vec::new();
        for v in [1.0f32, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 1.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(buf.len(), 32);
        let c = decode_scan(&buf, Path::new("mem")).unwrap();
        assert_eq!(c.points(), &[[1.0, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 1.0]]);
    }

    #[test]
    fn odd_length_is_format_error() {
        let d = tmp();
        let p = d.path().join("bad.bin");
        std::fs::write(&p, [0u8; 17]).unwrap();
        match read_scan(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_names_point() {
        let mut buf = vec![0u8; 32];
        buf[16 + 8..16 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_scan(&buf, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("point 1")), "{err}");
    }

    #[test]
    fn label_low_bits_are_remapped() {
        let mut schema = ClassSchema::identity(3, 0);
        schema.aliases.insert(10, 2);
        let bytes = [0u32, 0x0001_000A, 77]
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .collect::<Vec<_>>();
        let labels = decode_labels(&bytes, &schema, Path::new("mem")).unwrap();
        assert_eq!(labels, vec![0, 2, schema.background]);
    }

    #[test]
    fn labels_round_trip() {
        let d = tmp();
        let p = d.path().join("l.label");
        let schema = ClassSchema::identity(2, 1);
        write_labels(&[0, 1, 2], &schema, &p).unwrap();
        assert_eq!(read_labels(&p, &schema).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_cloud_writes_empty_file() {
        let d = tmp();
        let p = d.path().join("e.bin");
        write_scan(&PointCloud::empty(), &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let c = PointCloud::new(vec![[0.0; 4]; 3]).unwrap();
        assert!(LabeledScan::new(c, vec![0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn scan_round_trip_after_quantization(
            pts in prop::collection::vec(prop::array::uniform4(-100.0f64..100.0), 0..64)
        ) {
            let cloud = PointCloud::new(pts).unwrap();
            let bytes = encode_scan(&cloud);
            prop_assert_eq!(bytes.len(), cloud.len() * POINT_RECORD_BYTES);
            let back = decode_scan(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &cloud.quantized());
            // a second cycle is exact
            prop_assert_eq!(decode_scan(&encode_scan(&back), Path::new("mem")).unwrap(), back);
        }

        #[test]
        fn remapping_is_total(words in prop::collection::vec(any::<u32>(), 0..64)) {
            let schema = ClassSchema::default_weather();
            let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
            let labels = decode_labels(&bytes, &schema, Path::new("mem")).unwrap();
            prop_assert!(labels.iter().all(|&l| (l as usize) < schema.num_classes()));
        }
    }
}
