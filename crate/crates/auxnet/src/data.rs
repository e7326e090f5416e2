//! Dataset ingestion: IDX files, CIFAR-10 binary batches, and synthetic
//! generators (spiral, Gaussian mixtures) that keep the whole test suite
//! download-free.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Pixel-to-float mapping applied at load time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    /// Divide raw byte values by 255.
    Scale255,
    /// Per-channel standardization with statistics of the loaded set.
    Standardize,
}

/// Images `[N,C,H,W]` with integer class labels.
#[derive(Clone, Debug)]
pub struct LabeledData<T: Element> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Element> LabeledData<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(LabeledData { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    fn sample_shape(&self, n: usize) -> Vec<usize> {
        let s = self.images.shape();
        vec![n, s[1], s[2], s[3]]
    }

    /// Contiguous range `[start, end)` as a batch.
    pub fn slice(&self, start: usize, end: usize) -> (Tensor<T>, Vec<usize>) {
        let per = self.sample_len();
        let data = self.images.data()[start * per..end * per].to_vec();
        (
            Tensor::from_vec(self.sample_shape(end - start), data).expect("consistent shape"),
            self.labels[start..end].to_vec(),
        )
    }

    /// Gathers the given sample indices into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(self.sample_shape(indices.len()), data).expect("consistent shape"),
            labels,
        )
    }
}

/// Train/test split plus the label arity.
#[derive(Clone, Debug)]
pub struct DataSplit<T: Element> {
    pub train: LabeledData<T>,
    pub test: LabeledData<T>,
    pub num_classes: usize,
}

fn apply_normalization<T: Element>(
    bytes: &[u8],
    shape: &[usize],
    norm: Normalization,
) -> Tensor<T> {
    let mut data: Vec<T> = bytes.iter().map(|&b| T::from_f64(b as f64)).collect();
    match norm {
        Normalization::None => {}
        Normalization::Scale255 => {
            let inv = T::from_f64(1.0 / 255.0);
            for v in &mut data {
                *v = *v * inv;
            }
        }
        Normalization::Standardize => {
            let (n, c) = (shape[0], shape[1]);
            let hw = shape[2] * shape[3];
            for ci in 0..c {
                let mut sum = 0.0;
                let mut count = 0usize;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for v in &data[base..base + hw] {
                        sum += v.as_f64();
                        count += 1;
                    }
                }
                let mean = sum / count as f64;
                let mut var = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for v in &data[base..base + hw] {
                        var += (v.as_f64() - mean).powi(2);
                    }
                }
                let std = (var / count as f64).sqrt().max(1e-8);
                let (m, s) = (T::from_f64(mean), T::from_f64(1.0 / std));
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for v in &mut data[base..base + hw] {
                        *v = (*v - m) * s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), data).expect("shape from parser")
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_TYPE_U8: u8 = 0x08;

fn idx_err(path: &Path, offset: usize, what: impl std::fmt::Display) -> Error {
    Error::Data(format!(
        "{}: {what} at byte offset {offset}",
        path.display()
    ))
}

/// Parses an IDX file of unsigned bytes into `(dims, payload)`.
fn parse_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(idx_err(path, bytes.len(), "truncated magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_err(
            path,
            0,
            "bad IDX magic (first two bytes must be zero)",
        ));
    }
    if bytes[2] != IDX_TYPE_U8 {
        return Err(idx_err(
            path,
            2,
            format!("unsupported element type 0x{:02x} (only 0x08 u8)", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 || rank > 4 {
        return Err(idx_err(path, 3, format!("unsupported rank {rank}")));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(idx_err(path, bytes.len(), "truncated dimension header"));
    }
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let off = 4 + 4 * d;
        let v = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        dims.push(v);
    }
    let expect: usize = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| idx_err(path, 4, format!("dimension overflow {dims:?}")))?;
    if bytes.len() != header + expect {
        return Err(idx_err(
            path,
            bytes.len().min(header + expect),
            format!(
                "payload length {} does not match dims {dims:?} ({expect})",
                bytes.len() - header
            ),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Loads an IDX image file (`[N,H,W]` or `[N,C,H,W]`) as float tensors.
pub fn load_idx_images<T: Element>(path: &Path, norm: Normalization) -> Result<Tensor<T>> {
    let (dims, payload) = parse_idx(path)?;
    let shape = match dims.len() {
        3 => vec![dims[0], 1, dims[1], dims[2]],
        4 => dims.clone(),
        r => {
            return Err(Error::Data(format!(
                "{}: rank {r} is not an image file",
                path.display()
            )))
        }
    };
    Ok(apply_normalization(&payload, &shape, norm))
}

/// Loads an IDX label file (rank 1).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (dims, payload) = parse_idx(path)?;
    if dims.len() != 1 {
        return Err(Error::Data(format!(
            "{}: rank {} is not a label file",
            path.display(),
            dims.len()
        )));
    }
    Ok(payload.into_iter().map(|b| b as usize).collect())
}

/// Loads an images/labels IDX pair.
pub fn load_idx<T: Element>(
    images: &Path,
    labels: &Path,
    norm: Normalization,
) -> Result<LabeledData<T>> {
    let images = load_idx_images(images, norm)?;
    let labels = load_idx_labels(labels)?;
    LabeledData::new(images, labels)
}

/// Writes a u8 IDX file (used for fixtures and round-trip checks).
pub fn write_idx(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    let expect: usize = dims.iter().product();
    if expect != payload.len() || dims.is_empty() || dims.len() > 4 {
        return Err(Error::Data(format!(
            "write_idx: dims {dims:?} do not describe {} bytes",
            payload.len()
        )));
    }
    let mut out = vec![0u8, 0, IDX_TYPE_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    crate::metrics::write_atomic(path, &out)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3*32*32 pixels

/// Parses a CIFAR-10 binary batch file into `[N,3,32,32]` plus labels 0-9.
pub fn load_cifar10_binary<T: Element>(path: &Path, norm: Normalization) -> Result<LabeledData<T>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in 0..n {
        let base = rec * CIFAR_RECORD;
        let label = bytes[base];
        if label > 9 {
            return Err(Error::Data(format!(
                "{}: record {rec} has label {label} > 9",
                path.display()
            )));
        }
        labels.push(label as usize);
        pixels.extend_from_slice(&bytes[base + 1..base + CIFAR_RECORD]);
    }
    let images = apply_normalization(&pixels, &[n, 3, 32, 32], norm);
    LabeledData::new(images, labels)
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    #[default]
    Spiral,
    Gaussians,
}

/// Synthetic 2-D point datasets rendered onto a `1 x grid x grid` image.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub generator: Generator,
    pub samples: usize,
    pub classes: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_noise() -> f64 {
    0.05
}
fn default_grid() -> usize {
    8
}
fn default_train_fraction() -> f64 {
    0.8
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(
                "synthetic: classes must be >= 2".into(),
            ));
        }
        if self.samples < 2 * self.classes {
            return Err(Error::InvalidConfig(format!(
                "synthetic: need at least 2 samples per class, got {} for {} classes",
                self.samples, self.classes
            )));
        }
        if self.grid < 2 {
            return Err(Error::InvalidConfig("synthetic: grid must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.train_fraction) || self.train_fraction == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "synthetic: train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidConfig("synthetic: noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Spiral arc length in turns; interleaved arms stay about one grid cell
/// apart at this curvature, hard enough that head placement and training
/// strategy visibly matter.
const SPIRAL_TURNS: f64 = 1.1;
const SPIRAL_R0: f64 = 0.25;

/// Generates the raw labeled 2-D points (class-balanced, deterministic).
pub fn gen_points(spec: &SyntheticSpec) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let per_class = spec.samples / spec.classes;
    let mut points = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        // round-robin keeps classes balanced even when samples % classes != 0
        let class = if i < per_class * spec.classes {
            i % spec.classes
        } else {
            i - per_class * spec.classes
        };
        let (x, y) = match spec.generator {
            Generator::Spiral => {
                let t: f64 = rng.gen_range(0.0..1.0);
                let theta =
                    std::f64::consts::TAU * (SPIRAL_TURNS * t + class as f64 / spec.classes as f64);
                let r = SPIRAL_R0 + (1.0 - SPIRAL_R0) * t;
                (
                    r * theta.cos() + noise.sample(&mut rng),
                    r * theta.sin() + noise.sample(&mut rng),
                )
            }
            Generator::Gaussians => {
                let theta = std::f64::consts::TAU * class as f64 / spec.classes as f64;
                (
                    0.7 * theta.cos() + noise.sample(&mut rng),
                    0.7 * theta.sin() + noise.sample(&mut rng),
                )
            }
        };
        points.push([x, y]);
        labels.push(class);
    }
    Ok((points, labels))
}

/// Renders one point as a soft Gaussian bump on the grid.
fn render_point<T: Element>(point: [f64; 2], grid: usize, out: &mut [T]) {
    const EXTENT: f64 = 1.3; // grid covers [-EXTENT, EXTENT]
    let cell = 2.0 * EXTENT / grid as f64;
    let sigma = 0.75 * cell;
    for gy in 0..grid {
        let cy = -EXTENT + cell * (gy as f64 + 0.5);
        for gx in 0..grid {
            let cx = -EXTENT + cell * (gx as f64 + 0.5);
            let d2 = (cx - point[0]).powi(2) + (cy - point[1]).powi(2);
            out[gy * grid + gx] = T::from_f64((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
}

/// Generates a rendered, shuffled, disjointly split synthetic dataset.
pub fn gen_synthetic<T: Element>(spec: &SyntheticSpec) -> Result<DataSplit<T>> {
    let (points, labels) = gen_points(spec)?;
    let n = points.len();
    let grid = spec.grid;
    let mut images = vec![T::zero(); n * grid * grid];
    for (i, &p) in points.iter().enumerate() {
        render_point(p, grid, &mut images[i * grid * grid..(i + 1) * grid * grid]);
    }
    let all = LabeledData::new(Tensor::from_vec(vec![n, 1, grid, grid], images)?, labels)?;

    // shuffle then split; the split is disjoint by construction
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5911f);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * spec.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);
    let (train_images, train_labels) = all.gather(train_idx);
    let (test_images, test_labels) = all.gather(test_idx);
    Ok(DataSplit {
        train: LabeledData::new(train_images, train_labels)?,
        test: LabeledData::new(test_images, test_labels)?,
        num_classes: spec.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(generator: Generator) -> SyntheticSpec {
        SyntheticSpec {
            generator,
            samples: 200,
            classes: 2,
            noise: 0.02,
            seed: 9,
            grid: 8,
            train_fraction: 0.8,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a: DataSplit<f32> = gen_synthetic(&spec(Generator::Spiral)).unwrap();
        let b: DataSplit<f32> = gen_synthetic(&spec(Generator::Spiral)).unwrap();
        assert_eq!(a.train.images.data(), b.train.images.data());
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.test.labels, b.test.labels);
    }

    #[test]
    fn synthetic_counts_and_split() {
        let split: DataSplit<f32> = gen_synthetic(&spec(Generator::Gaussians)).unwrap();
        assert_eq!(split.train.len() + split.test.len(), 200);
        assert_eq!(split.train.len(), 160);
        // class balance within 1
        let ones = split.train.labels.iter().filter(|&&l| l == 1).count()
            + split.test.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 100);
    }

    #[test]
    fn far_separated_gaussians_are_linearly_separable() {
        let s = SyntheticSpec {
            noise: 0.02,
            ..spec(Generator::Gaussians)
        };
        let (points, labels) = gen_points(&s).unwrap();
        // closed-form rule: sign of projection onto the center difference
        let theta0 = 0.0f64;
        let theta1 = std::f64::consts::PI;
        let mu0 = [0.7 * theta0.cos(), 0.7 * theta0.sin()];
        let mu1 = [0.7 * theta1.cos(), 0.7 * theta1.sin()];
        let w = [mu0[0] - mu1[0], mu0[1] - mu1[1]];
        let mid = [(mu0[0] + mu1[0]) / 2.0, (mu0[1] + mu1[1]) / 2.0];
        let correct = points
            .iter()
            .zip(&labels)
            .filter(|&(p, &label)| {
                let score = w[0] * (p[0] - mid[0]) + w[1] * (p[1] - mid[1]);
                (score > 0.0) == (label == 0)
            })
            .count();
        assert!(correct as f64 / points.len() as f64 > 0.99);
    }

    #[test]
    fn degenerate_spec_rejected() {
        let mut s = spec(Generator::Spiral);
        s.samples = 3;
        assert!(gen_points(&s).is_err());
        let mut s = spec(Generator::Spiral);
        s.classes = 1;
        assert!(gen_points(&s).is_err());
    }
}
