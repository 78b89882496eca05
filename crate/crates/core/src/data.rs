//! Labeled datasets and synthetic domain-incremental streams.
//!
//! Every generated stream keeps one label set across domains while the input
//! distribution shifts from domain to domain. Randomness for domain `t` is
//! keyed by `(seed, t, purpose)`, so appending domains never perturbs the
//! data of earlier ones.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major inputs with one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || inputs.len() != dim * labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: vec![inputs.len()],
                right: vec![labels.len(), dim],
            });
        }
        Ok(Self { dim, inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            dim: self.dim,
            inputs,
            labels,
        }
    }

    fn push(&mut self, row: &[f64], label: usize) {
        self.inputs.extend_from_slice(row);
        self.labels.push(label);
    }

    fn extend(&mut self, other: &Dataset) {
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Per-class counts over `num_classes` classes.
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                h[l] += 1;
            }
        }
        h
    }
}

/// One domain of a stream. `task_id` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTask {
    pub task_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    RotatedBlobs,
    PermutedFeatures,
    NoisyChannels,
}

impl std::str::FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotated_blobs" => Ok(Self::RotatedBlobs),
            "permuted_features" => Ok(Self::PermutedFeatures),
            "noisy_channels" => Ok(Self::NoisyChannels),
            other => Err(Error::Config(format!(
                "unknown stream kind `{other}` (expected rotated_blobs, permuted_features or noisy_channels)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub num_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Training samples per domain.
    pub samples_per_domain: usize,
    /// Share of each domain's samples held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            kind: StreamKind::RotatedBlobs,
            num_domains: 5,
            num_classes: 4,
            input_dim: 16,
            samples_per_domain: 500,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::Config("num_domains must be >= 1".into()));
        }
        if self.num_classes == 0 || self.input_dim == 0 {
            return Err(Error::Config("num_classes and input_dim must be >= 1".into()));
        }
        if self.samples_per_domain < self.num_classes {
            return Err(Error::Config(format!(
                "samples_per_domain {} must cover all {} classes",
                self.samples_per_domain, self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.kind == StreamKind::RotatedBlobs && self.input_dim < 2 {
            return Err(Error::Config("rotated_blobs needs input_dim >= 2".into()));
        }
        Ok(())
    }

    /// Per-class sample counts for the train and test splits.
    fn split_counts(&self) -> (Vec<usize>, Vec<usize>) {
        let c = self.num_classes;
        let train: Vec<usize> = (0..c)
            .map(|k| self.samples_per_domain / c + usize::from(k < self.samples_per_domain % c))
            .collect();
        let ratio = self.test_fraction / (1.0 - self.test_fraction);
        let test = train.iter().map(|n| (*n as f64 * ratio).round() as usize).collect();
        (train, test)
    }
}

// Purposes for keyed random streams.
const BASE: u64 = 0xB45E;
const SAMPLES: u64 = 0x5A3B;
const DOMAIN: u64 = 0xD0A1;
const SHUFFLE: u64 = 0x5F1E;

const RADIUS: f64 = 2.0;
const BLOB_NOISE: f64 = 0.45;
const STYLE_SCALE: f64 = 1.0;

/// Builds a T-domain stream. Pure in `spec`.
pub fn generate(spec: &StreamSpec) -> Result<Vec<DomainTask>> {
    spec.validate()?;
    let base = BaseGeometry::new(spec);
    (1..=spec.num_domains)
        .map(|t| {
            let shift = DomainShift::new(spec, t);
            let (train_counts, test_counts) = spec.split_counts();
            let mut rng = rng::stream(spec.seed, t as u64, SAMPLES);
            let train = sample_split(spec, &base, &shift, &train_counts, &mut rng);
            let test = sample_split(spec, &base, &shift, &test_counts, &mut rng);
            Ok(DomainTask { task_id: t, train, test })
        })
        .collect()
}

struct BaseGeometry {
    /// Class centroids, `C×D`.
    centroids: Vec<f64>,
}

impl BaseGeometry {
    fn new(spec: &StreamSpec) -> Self {
        let (c, d) = (spec.num_classes, spec.input_dim);
        let mut centroids = vec![0.0; c * d];
        match spec.kind {
            StreamKind::RotatedBlobs => {
                for k in 0..c {
                    let angle = 2.0 * PI * k as f64 / c as f64;
                    centroids[k * d] = RADIUS * angle.cos();
                    centroids[k * d + 1] = RADIUS * angle.sin();
                }
            }
            StreamKind::PermutedFeatures | StreamKind::NoisyChannels => {
                let mut rng = rng::stream(spec.seed, 0, BASE);
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                for k in 0..c {
                    let row = &mut centroids[k * d..(k + 1) * d];
                    row.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    row.iter_mut().for_each(|v| *v *= RADIUS / n);
                }
            }
        }
        Self { centroids }
    }
}

/// Per-domain transformation applied on top of the base geometry.
struct DomainShift {
    noise: f64,
    /// Rotation angle in the class plane.
    angle: f64,
    /// Offset added outside the class plane (rotated_blobs only).
    style: Vec<f64>,
    permutation: Vec<usize>,
    /// Per-coordinate scale factors (noisy_channels only).
    scales: Vec<f64>,
    extra_noise: f64,
}

impl DomainShift {
    fn new(spec: &StreamSpec, t: usize) -> Self {
        let d = spec.input_dim;
        let shift_index = (t - 1) as f64;
        let mut rng = rng::stream(spec.seed, t as u64, DOMAIN);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut shift = Self {
            noise: BLOB_NOISE * (1.0 + 0.1 * shift_index),
            angle: 0.0,
            style: vec![0.0; d],
            permutation: (0..d).collect(),
            scales: vec![1.0; d],
            extra_noise: 0.0,
        };
        match spec.kind {
            StreamKind::RotatedBlobs => {
                shift.angle = shift_index * PI / spec.num_domains as f64;
                if t > 1 {
                    for v in shift.style.iter_mut().skip(2) {
                        *v = STYLE_SCALE * normal.sample(&mut rng);
                    }
                }
            }
            StreamKind::PermutedFeatures => {
                if t > 1 {
                    shift.permutation.shuffle(&mut rng);
                }
            }
            StreamKind::NoisyChannels => {
                if t > 1 {
                    let factor = 1.0 + 0.5 * shift_index;
                    for s in shift.scales.iter_mut() {
                        if rng.random_bool(0.5) {
                            *s = if rng.random_bool(0.5) { factor } else { 1.0 / factor };
                        }
                    }
                    shift.extra_noise = 0.1 * shift_index;
                }
            }
        }
        shift
    }

    fn apply(&self, x: &mut [f64], rng: &mut impl Rng) {
        if self.angle != 0.0 {
            let (s, c) = self.angle.sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        x.iter_mut().zip(&self.style).for_each(|(v, o)| *v += o);
        if self.permutation.iter().enumerate().any(|(i, p)| i != *p) {
            let src = x.to_vec();
            for (i, p) in self.permutation.iter().enumerate() {
                x[i] = src[*p];
            }
        }
        x.iter_mut().zip(&self.scales).for_each(|(v, s)| *v *= s);
        if self.extra_noise > 0.0 {
            let normal = Normal::new(0.0, self.extra_noise).expect("positive scale");
            x.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
}

fn sample_split(
    spec: &StreamSpec,
    base: &BaseGeometry,
    shift: &DomainShift,
    counts: &[usize],
    rng: &mut impl Rng,
) -> Dataset {
    let d = spec.input_dim;
    let noise = Normal::new(0.0, shift.noise).expect("positive scale");
    let mut out = Dataset::empty(d);
    let mut row = vec![0.0; d];
    // Interleave classes so consecutive rows cycle through labels.
    let max = counts.iter().copied().max().unwrap_or(0);
    for i in 0..max {
        for (k, &n) in counts.iter().enumerate() {
            if i >= n {
                continue;
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v = base.centroids[k * d + j] + noise.sample(rng);
            }
            shift.apply(&mut row, rng);
            out.push(&row, k);
        }
    }
    out
}

/// Concatenates every task's splits into one task, shuffled by `seed`. A
/// single task is returned unchanged.
pub fn joint_view(tasks: &[DomainTask], seed: u64) -> Result<DomainTask> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Config("joint view of an empty stream".into()))?;
    if tasks.len() == 1 {
        return Ok(first.clone());
    }
    let dim = first.train.dim();
    let mut train = Dataset::empty(dim);
    let mut test = Dataset::empty(dim);
    for (i, t) in tasks.iter().enumerate() {
        if t.train.dim() != dim || t.test.dim() != dim {
            return Err(Error::Schema {
                record: i,
                reason: format!("task {} has input width {} (expected {dim})", t.task_id, t.train.dim()),
            });
        }
        train.extend(&t.train);
        test.extend(&t.test);
    }
    let mut rng = rng::stream(seed, 0, SHUFFLE);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng);
    let train = train.gather(&idx);
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.shuffle(&mut rng);
    let test = test.gather(&idx);
    Ok(DomainTask {
        task_id: 1,
        train,
        test,
    })
}

/// Number of classes implied by the largest label in a stream.
pub fn infer_num_classes(tasks: &[DomainTask]) -> usize {
    tasks
        .iter()
        .flat_map(|t| t.train.labels().iter().chain(t.test.labels()))
        .max()
        .map_or(0, |m| m + 1)
}

pub mod file {
    //! Dataset file layout (little-endian):
    //! `b"DBDS"`, `u32` version, `u32` T, `u32` C, `u32` D, then per task a
    //! `u64` train count and `u64` test count, then for each task its train
    //! rows followed by its test rows, each row `D × f64` plus a `u32` label.

    use super::*;

    const MAGIC: &[u8; 4] = b"DBDS";
    const VERSION: u32 = 1;
    const HEADER: usize = 20;

    pub fn encode(tasks: &[DomainTask], num_classes: usize) -> Result<Vec<u8>> {
        let dim = tasks.first().map_or(0, |t| t.train.dim());
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tasks.len() as u32).to_le_bytes());
        out.extend_from_slice(&(num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for t in tasks {
            out.extend_from_slice(&(t.train.len() as u64).to_le_bytes());
            out.extend_from_slice(&(t.test.len() as u64).to_le_bytes());
        }
        let mut record = 0;
        for t in tasks {
            for split in [&t.train, &t.test] {
                if split.dim() != dim {
                    return Err(Error::Schema {
                        record,
                        reason: format!("row width {} differs from {dim}", split.dim()),
                    });
                }
                for i in 0..split.len() {
                    for v in split.row(i) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    out.extend_from_slice(&(split.labels()[i] as u32).to_le_bytes());
                    record += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Vec<DomainTask>> {
        let u32_at = |pos: usize| -> Option<u32> {
            bytes.get(pos..pos + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        };
        let u64_at = |pos: usize| -> Option<u64> {
            bytes.get(pos..pos + 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        };
        let header_err = |reason: &str| Error::Schema {
            record: 0,
            reason: format!("header: {reason}"),
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(header_err("bad magic"));
        }
        if u32_at(4) != Some(VERSION) {
            return Err(header_err("unsupported version"));
        }
        let (t, c, d) = match (u32_at(8), u32_at(12), u32_at(16)) {
            (Some(t), Some(c), Some(d)) => (t as usize, c as usize, d as usize),
            _ => return Err(header_err("truncated")),
        };
        if d == 0 || c == 0 {
            return Err(header_err("zero classes or width"));
        }
        let mut counts = Vec::with_capacity(t.min(1 << 16));
        for i in 0..t {
            let pos = HEADER + 16 * i;
            match (u64_at(pos), u64_at(pos + 8)) {
                (Some(a), Some(b)) => counts.push((a as usize, b as usize)),
                _ => return Err(header_err("truncated record counts")),
            }
        }
        let row_bytes = 8 * d + 4;
        let mut pos = HEADER + 16 * t;
        let mut record = 0;
        let mut tasks = Vec::with_capacity(t);
        for (ti, &(n_train, n_test)) in counts.iter().enumerate() {
            let mut splits = [Dataset::empty(d), Dataset::empty(d)];
            for (split, n) in splits.iter_mut().zip([n_train, n_test]) {
                for _ in 0..n {
                    let Some(raw) = bytes.get(pos..pos + row_bytes) else {
                        return Err(Error::Schema {
                            record,
                            reason: "truncated record".into(),
                        });
                    };
                    let row: Vec<f64> = raw[..8 * d]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    let label = u32::from_le_bytes(raw[8 * d..].try_into().unwrap()) as usize;
                    if label >= c {
                        return Err(Error::Schema {
                            record,
                            reason: format!("label {label} >= {c} classes"),
                        });
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Schema {
                            record,
                            reason: "non-finite input value".into(),
                        });
                    }
                    split.push(&row, label);
                    pos += row_bytes;
                    record += 1;
                }
            }
            let [train, test] = splits;
            tasks.push(DomainTask {
                task_id: ti + 1,
                train,
                test,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Schema {
                record,
                reason: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        Ok(tasks)
    }
}

pub fn save_external(path: &Path, tasks: &[DomainTask], num_classes: usize) -> Result<()> {
    fs::write(path, file::encode(tasks, num_classes)?)?;
    Ok(())
}

/// Reads a dataset file. Nothing is returned unless the whole file validates.
pub fn load_external(path: &Path) -> Result<Vec<DomainTask>> {
    let bytes = fs::read(path)?;
    file::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: StreamKind) -> StreamSpec {
        StreamSpec {
            kind,
            num_domains: 4,
            num_classes: 4,
            input_dim: 8,
            samples_per_domain: 400,
            test_fraction: 0.25,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [
            StreamKind::RotatedBlobs,
            StreamKind::PermutedFeatures,
            StreamKind::NoisyChannels,
        ] {
            assert_eq!(generate(&spec(kind)).unwrap(), generate(&spec(kind)).unwrap());
        }
    }

    #[test]
    fn classes_are_balanced_and_constant_across_domains() {
        for kind in [
            StreamKind::RotatedBlobs,
            StreamKind::PermutedFeatures,
            StreamKind::NoisyChannels,
        ] {
            let tasks = generate(&spec(kind)).unwrap();
            assert_eq!(tasks.len(), 4);
            for t in &tasks {
                assert_eq!(t.train.class_histogram(4), vec![100; 4]);
                assert_eq!(t.test.class_histogram(4), vec![33; 4]);
            }
        }
    }

    #[test]
    fn adding_domains_keeps_earlier_ones() {
        let mut s = spec(StreamKind::PermutedFeatures);
        let short = generate(&s).unwrap();
        s.num_domains = 6;
        let long = generate(&s).unwrap();
        assert_eq!(short[..2], long[..2]);
    }

    #[test]
    fn single_domain_has_no_rotation() {
        let mut s = spec(StreamKind::RotatedBlobs);
        s.num_domains = 1;
        let tasks = generate(&s).unwrap();
        // Class-0 centroid sits on the positive first axis, untouched.
        let rows: Vec<&[f64]> = (0..tasks[0].train.len())
            .filter(|&i| tasks[0].train.labels()[i] == 0)
            .map(|i| tasks[0].train.row(i))
            .collect();
        let mean0: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / rows.len() as f64;
        let mean1: f64 = rows.iter().map(|r| r[1]).sum::<f64>() / rows.len() as f64;
        assert!((mean0 - RADIUS).abs() < 0.15, "{mean0}");
        assert!(mean1.abs() < 0.15, "{mean1}");
    }

    #[test]
    fn rotated_blobs_needs_two_dims() {
        let mut s = spec(StreamKind::RotatedBlobs);
        s.input_dim = 1;
        assert!(matches!(generate(&s), Err(Error::Config(_))));
    }

    #[test]
    fn joint_view_concatenates() {
        let mut s = spec(StreamKind::RotatedBlobs);
        s.num_domains = 2;
        s.samples_per_domain = 100;
        let tasks = generate(&s).unwrap();
        let joint = joint_view(&tasks, 3).unwrap();
        assert_eq!(joint.train.len(), 200);
        let expected: Vec<usize> = tasks[0]
            .train
            .class_histogram(4)
            .iter()
            .zip(tasks[1].train.class_histogram(4))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(joint.train.class_histogram(4), expected);
        assert_eq!(joint_view(&tasks[..1], 3).unwrap(), tasks[0]);
        assert!(joint_view(&[], 0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let tasks = generate(&spec(StreamKind::NoisyChannels)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream.dbds");
        save_external(&path, &tasks, 4).unwrap();
        assert_eq!(load_external(&path).unwrap(), tasks);
        assert!(matches!(
            load_external(&dir.path().join("missing")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn out_of_range_label_names_the_record() {
        let mut s = spec(StreamKind::RotatedBlobs);
        s.num_domains = 1;
        s.samples_per_domain = 8;
        let tasks = generate(&s).unwrap();
        let mut bytes = file::encode(&tasks, 4).unwrap();
        // Third record's label sits at the end of its row.
        let row = 8 * 8 + 4;
        let pos = 20 + 16 + 2 * row + 8 * 8;
        bytes[pos..pos + 4].copy_from_slice(&4u32.to_le_bytes());
        match file::decode(&bytes) {
            Err(Error::Schema { record, .. }) => assert_eq!(record, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_is_rejected_at_every_length() {
        let mut s = spec(StreamKind::RotatedBlobs);
        s.num_domains = 2;
        s.samples_per_domain = 4;
        s.input_dim = 2;
        let bytes = file::encode(&generate(&s).unwrap(), 4).unwrap();
        for cut in 0..bytes.len() {
            assert!(file::decode(&bytes[..cut]).is_err(), "accepted cut at {cut}");
        }
    }
}
