//! Labeled datasets: synthetic Gaussian-cluster corpora, partitioning across
//! devices, and the binary `PBDS` file format.

use std::fs;
use std::io::Write as _;
use std::ops::Deref;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::rng::{self, stream};

pub const MAGIC: &[u8; 4] = b"PBDS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 2 + 4;
const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Bytes per stored sample: f64 features plus a u16 label.
pub fn default_sample_bytes(feature_dim: usize) -> u32 {
    (feature_dim * 8 + 2) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the storage size charged per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_bytes: Option<u32>,
}

impl DatasetSpec {
    /// Checks invariants; error paths are JSON pointers below `prefix`.
    pub fn validate_at(&self, prefix: &str) -> Result<()> {
        let at = |field: &str| format!("{prefix}/{field}");
        if self.num_samples == 0 {
            return Err(Error::config(at("num_samples"), "must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::config(at("num_classes"), "must be in [2, 65535]"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config(at("feature_dim"), "must be positive"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config(at("class_separation"), "must be positive"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(at("noise_std"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config(at("label_noise"), "must be in [0, 1)"));
        }
        if self.per_sample_bytes == Some(0) {
            return Err(Error::config(at("per_sample_bytes"), "must be positive"));
        }
        Ok(())
    }
}

/// A labeled sample matrix. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    num_classes: usize,
    per_sample_bytes: u32,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        feature_dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        Self::with_sample_bytes(
            feature_dim,
            num_classes,
            features,
            labels,
            default_sample_bytes(feature_dim),
        )
    }

    pub fn with_sample_bytes(
        feature_dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        per_sample_bytes: u32,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::invalid("dataset", "feature_dim must be positive"));
        }
        if num_classes < 2 || num_classes > u16::MAX as usize {
            return Err(Error::invalid(
                "dataset",
                "num_classes must be in [2, 65535]",
            ));
        }
        if per_sample_bytes == 0 {
            return Err(Error::invalid(
                "dataset",
                "per_sample_bytes must be positive",
            ));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} feature values for {} samples of dimension {feature_dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::Label {
                label: labels[i],
                num_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset", "features must be finite"));
        }
        Ok(Self {
            feature_dim,
            num_classes,
            per_sample_bytes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_sample_bytes(&self) -> u32 {
        self.per_sample_bytes
    }

    pub fn set_per_sample_bytes(&mut self, bytes: u32) {
        assert!(bytes > 0, "per_sample_bytes must be positive");
        self.per_sample_bytes = bytes;
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            x: self.features(i),
            y: self.labels[i],
        }
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = Sample<'_>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// Samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            per_sample_bytes: self.per_sample_bytes,
            features,
            labels,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    /// Storage footprint of `count` samples.
    ///
    /// # Panics
    /// If `count` exceeds the number of samples.
    pub fn storage_bytes(&self, count: usize) -> u64 {
        assert!(
            count <= self.len(),
            "count {count} exceeds {} samples",
            self.len()
        );
        count as u64 * self.per_sample_bytes as u64
    }
}

/// One device's local shard. Local indices `0..len()` are fixed at
/// construction; pruning masks and tie-breaking refer to them.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDataset {
    pub device_id: usize,
    data: Dataset,
}

impl DeviceDataset {
    pub fn new(device_id: usize, data: Dataset) -> Self {
        Self { device_id, data }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn into_data(self) -> Dataset {
        self.data
    }
}

impl Deref for DeviceDataset {
    type Target = Dataset;

    fn deref(&self) -> &Dataset {
        &self.data
    }
}

/// Class means: vertices of a regular simplex with edge `separation`,
/// randomly oriented in feature space.
///
/// The simplex needs `num_classes - 1` dimensions. When the feature space is
/// smaller, the randomly rotated simplex is projected onto the first
/// `feature_dim` axes and rescaled so the closest pair of means is still
/// `separation` apart.
fn class_means(spec: &DatasetSpec, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let c = spec.num_classes;
    let m = c - 1;
    let d = spec.feature_dim;

    // Centered one-hot vectors span an (C-1)-dimensional subspace with
    // pairwise distance sqrt(2). Express them in an orthonormal basis of it.
    let centered: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            (0..c)
                .map(|j| if j == k { 1.0 } else { 0.0 } - 1.0 / c as f64)
                .collect()
        })
        .collect();
    let basis = gram_schmidt(centered[..m].to_vec());
    let scale = spec.class_separation / std::f64::consts::SQRT_2;
    let simplex: Vec<Vec<f64>> = centered
        .iter()
        .map(|v| basis.iter().map(|u| scale * dot(u, v)).collect())
        .collect();

    // Random orthonormal columns linking the simplex space and feature space.
    let (rows, cols) = (d.max(m), d.min(m));
    let gaussian: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let frame = gram_schmidt(gaussian);

    let mut means: Vec<Vec<f64>> = if d >= m {
        simplex
            .iter()
            .map(|a| {
                (0..d)
                    .map(|i| frame.iter().zip(a).map(|(col, ak)| col[i] * ak).sum())
                    .collect()
            })
            .collect()
    } else {
        simplex
            .iter()
            .map(|a| frame.iter().map(|col| dot(col, a)).collect())
            .collect()
    };

    if d < m {
        let mut closest = f64::INFINITY;
        for i in 0..c {
            for j in i + 1..c {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                closest = closest.min(dist);
            }
        }
        if closest > 0.0 {
            let s = spec.class_separation / closest;
            means.iter_mut().flatten().for_each(|v| *v *= s);
        }
    }
    means
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn gram_schmidt(mut vectors: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..vectors.len() {
        for j in 0..i {
            let proj = dot(&vectors[i], &vectors[j]);
            let (done, rest) = vectors.split_at_mut(i);
            for (v, u) in rest[0].iter_mut().zip(&done[j]) {
                *v -= proj * u;
            }
        }
        let norm = dot(&vectors[i], &vectors[i]).sqrt();
        vectors[i].iter_mut().for_each(|v| *v /= norm);
    }
    vectors
}

/// Gaussian clusters around simplex-vertex class means.
///
/// Labels are balanced (`n / C` per class, remainder to the lowest classes)
/// before label noise. Features, true labels, and label noise come from
/// separate random streams, so generating the same spec with and without
/// label noise yields identical features.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate_at("")?;
    let (n, c, d) = (spec.num_samples, spec.num_classes, spec.feature_dim);

    let mut mean_rng = rng::rng(spec.seed, &[stream::CLASS_MEANS]);
    let means = class_means(spec, &mut mean_rng);

    let mut sample_rng = rng::rng(spec.seed, &[stream::SAMPLES]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut sample_rng);
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        for &mu in &means[y] {
            let z: f64 = sample_rng.sample(StandardNormal);
            features.push(mu + spec.noise_std * z);
        }
    }

    if spec.label_noise > 0.0 {
        let mut noise_rng = rng::rng(spec.seed, &[stream::LABEL_NOISE]);
        let flips = (spec.label_noise * n as f64).round() as usize;
        let mut chosen = index::sample(&mut noise_rng, n, flips).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            labels[i] = noise_rng.random_range(0..c);
        }
    }

    let bytes = spec
        .per_sample_bytes
        .unwrap_or_else(|| default_sample_bytes(d));
    Dataset::with_sample_bytes(d, c, features, labels, bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_devices: usize,
    pub scheme: PartitionScheme,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::invalid("partition", "num_devices must be positive"));
        }
        if let PartitionScheme::Dirichlet { beta } = self.scheme {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::invalid("partition", "beta must be positive"));
            }
        }
        Ok(())
    }
}

/// Assigns corpus indices to devices. Each device's indices are ascending.
pub fn partition_indices(
    labels: &[usize],
    num_classes: usize,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let (n, k) = (labels.len(), spec.num_devices);
    if k > n {
        return Err(Error::InfeasiblePartition {
            samples: n,
            devices: k,
        });
    }
    let mut rng = rng::rng(spec.seed, &[stream::PARTITION]);
    let mut shards = match spec.scheme {
        PartitionScheme::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (base, extra) = (n / k, n % k);
            let mut shards = Vec::with_capacity(k);
            let mut start = 0;
            for dev in 0..k {
                let len = base + usize::from(dev < extra);
                shards.push(order[start..start + len].to_vec());
                start += len;
            }
            shards
        }
        PartitionScheme::Dirichlet { beta } => {
            dirichlet_split(labels, num_classes, k, beta, &mut rng)?
        }
    };
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(shards)
}

fn dirichlet_split(
    labels: &[usize],
    num_classes: usize,
    k: usize,
    beta: f64,
    rng: &mut rng::Rng,
) -> Result<Vec<Vec<usize>>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid("partition", e.to_string()))?;
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }

    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut shards = vec![Vec::new(); k];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(rng);
            let props = loop {
                let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 && total.is_finite() {
                    break draws.into_iter().map(|g| g / total).collect::<Vec<_>>();
                }
            };
            let nc = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (dev, p) in props.iter().enumerate() {
                cum += p;
                let end = if dev + 1 == k {
                    nc
                } else {
                    ((cum * nc as f64).floor() as usize).clamp(start, nc)
                };
                shards[dev].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
        log::debug!("dirichlet partition attempt {attempt} left a device empty; redrawing");
    }
    Err(Error::InfeasiblePartition {
        samples: labels.len(),
        devices: k,
    })
}

/// Splits `data` into per-device shards.
pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<DeviceDataset>> {
    let shards = partition_indices(data.labels(), data.num_classes(), spec)?;
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(dev, idx)| DeviceDataset::new(dev, data.subset(&idx)))
        .collect())
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = u32::try_from(data.len())
        .map_err(|_| Error::invalid("dataset", "too many samples for the file format"))?;
    let d = u32::try_from(data.feature_dim())
        .map_err(|_| Error::invalid("dataset", "feature_dim too large for the file format"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * (data.feature_dim() * 8 + 2));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&(data.num_classes() as u16).to_le_bytes());
    buf.extend_from_slice(&data.per_sample_bytes().to_le_bytes());
    for i in 0..data.len() {
        for v in data.features(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(data.label(i) as u16).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"PBDS\""));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n = u32_at(6) as usize;
    let d = u32_at(10) as usize;
    let c = u16_at(14) as usize;
    let per_sample_bytes = u32_at(16);
    if d == 0 {
        return Err(format_err(10, "feature_dim must be positive"));
    }
    if c < 2 {
        return Err(format_err(14, "num_classes must be at least 2"));
    }
    if per_sample_bytes == 0 {
        return Err(format_err(16, "per_sample_bytes must be positive"));
    }
    let record = d * 8 + 2;
    let expected = n
        .checked_mul(record)
        .ok_or_else(|| format_err(6, "sample count overflows"))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        return Err(format_err(
            HEADER_LEN + actual.min(expected),
            format!("payload should be {expected} bytes, found {actual}"),
        ));
    }
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut off = HEADER_LEN;
    for _ in 0..n {
        for _ in 0..d {
            let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err(off, "non-finite feature"));
            }
            features.push(v);
            off += 8;
        }
        let y = u16_at(off) as usize;
        if y >= c {
            return Err(format_err(
                off,
                format!("label {y} out of range for {c} classes"),
            ));
        }
        labels.push(y);
        off += 2;
    }
    Dataset::with_sample_bytes(d, c, features, labels, per_sample_bytes)
}

/// Reads a CSV with header `f0,...,f{d-1},label`. The class count is the
/// largest label plus one unless given.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let d = headers.len().saturating_sub(1);
    let expected: Vec<String> = (0..d)
        .map(|i| format!("f{i}"))
        .chain(["label".to_string()])
        .collect();
    if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(format_err(0, "CSV header must be f0,...,f{d-1},label"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let offset = record.position().map_or(0, |p| p.byte() as usize);
        for field in record.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(offset, format!("bad feature value {field:?}")))?;
            features.push(v);
        }
        let field = &record[d];
        let y: usize = field
            .trim()
            .parse()
            .map_err(|_| format_err(offset, format!("bad label {field:?}")))?;
        labels.push(y);
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::new(d, c, features, labels)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            offset,
            reason: format!("{other:?}"),
        },
    }
}
