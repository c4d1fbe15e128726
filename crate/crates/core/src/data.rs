//! Dataset providers and normalization: synthetic Gaussian images, the
//! CIFAR-10 binary format, a synthetic token-embedding text pipeline, and
//! PPM/PGM export for visual checks.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// Per-channel normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::ShapeMismatch(
                "mean and std channel counts differ".into(),
            ));
        }
        if !std.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Domain("std entries must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Maps channel stats onto a flattened feature index (contiguous channel
    /// planes). The width must be divisible by the channel count.
    pub fn feature_stats(&self, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.channels();
        if c == 0 || width % c != 0 {
            return Err(Error::ShapeMismatch(format!(
                "width {width} not divisible by {c} channels"
            )));
        }
        let plane = width / c;
        let mut mean = Vec::with_capacity(width);
        let mut std = Vec::with_capacity(width);
        for ch in 0..c {
            mean.extend(std::iter::repeat(self.mean[ch]).take(plane));
            std.extend(std::iter::repeat(self.std[ch]).take(plane));
        }
        Ok((mean, std))
    }
}

/// Shape metadata for the flattened samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataLayout {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Tokens {
        seq_len: usize,
        embed_dim: usize,
    },
    Flat {
        width: usize,
    },
}

impl DataLayout {
    pub fn feature_width(&self) -> usize {
        match *self {
            DataLayout::Image {
                channels,
                height,
                width,
            } => channels * height * width,
            DataLayout::Tokens { seq_len, embed_dim } => seq_len * embed_dim,
            DataLayout::Flat { width } => width,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            DataLayout::Image { channels, .. } => channels,
            _ => 1,
        }
    }
}

/// A flattened dataset: one sample per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub layout: DataLayout,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.samples.cols()
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let mut m = Matrix::zeros(indices.len(), self.width());
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &idx) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.samples.row(idx));
            labels.push(self.labels[idx]);
        }
        (m, labels)
    }

    /// `count` batches of size `b`, drawn without replacement after a
    /// per-call shuffle.
    pub fn sample_batches(
        &self,
        count: usize,
        b: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<(Matrix, Vec<usize>)>> {
        if count * b > self.len() {
            return Err(Error::InvalidConfig(format!(
                "{count} batches of {b} exceed {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        Ok(order[..count * b]
            .chunks(b)
            .map(|chunk| self.batch(chunk))
            .collect())
    }
}

/// I.i.d. standard-normal features with uniform random labels.
pub fn synthetic_gaussian(
    n: usize,
    shape: (usize, usize, usize),
    rng: &mut RngStream,
) -> Dataset {
    let (channels, height, width) = shape;
    let feature_width = channels * height * width;
    let samples = rng.normal_matrix(n, feature_width);
    let num_classes = 10;
    let labels = (0..n).map(|_| rng.index(num_classes)).collect();
    Dataset {
        samples,
        labels,
        layout: DataLayout::Image {
            channels,
            height,
            width,
        },
        num_classes,
    }
}

pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILES: [&str; 1] = ["test_batch.bin"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn parse_cifar_records(bytes: &[u8], samples: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::DataFormat(format!(
            "file length {} is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::DataFormat(format!("label {label} > 9")));
        }
        labels.push(label);
        samples.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Loads the standard CIFAR-10 binary batches from a directory (or its
/// `cifar-10-batches-bin` subdirectory), scaling pixels to [0, 1].
///
/// Records are 3073 bytes: one label byte followed by 3072 pixel bytes in
/// channel-major R, G, B order, row-major within each channel.
pub fn cifar10_load(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let base = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let files: &[&str] = match split {
        Split::Train => &CIFAR_TRAIN_FILES,
        Split::Test => &CIFAR_TEST_FILES,
    };
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let bytes = fs::read(base.join(name))?;
        parse_cifar_records(&bytes, &mut samples, &mut labels)?;
    }
    let n = labels.len();
    Ok(Dataset {
        samples: Matrix::from_vec(n, 3072, samples)?,
        labels,
        layout: DataLayout::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
        num_classes: 10,
    })
}

/// Serializes a [0, 1]-scaled image dataset back to the CIFAR-10 binary
/// record format.
pub fn cifar10_save(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.width() != 3072 {
        return Err(Error::ShapeMismatch(format!(
            "CIFAR-10 records need width 3072, got {}",
            dataset.width()
        )));
    }
    let mut bytes = Vec::with_capacity(dataset.len() * CIFAR_RECORD_BYTES);
    for r in 0..dataset.len() {
        bytes.push(dataset.labels[r] as u8);
        bytes.extend(
            dataset
                .samples
                .row(r)
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Per-channel mean and (population) standard deviation of a dataset.
pub fn compute_stats(dataset: &Dataset) -> Result<NormalizationStats> {
    let c = dataset.layout.channels();
    let width = dataset.width();
    if width % c != 0 {
        return Err(Error::ShapeMismatch(
            "feature width not divisible by channel count".into(),
        ));
    }
    let plane = width / c;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let count = (dataset.len() * plane) as f64;
    for r in 0..dataset.len() {
        let row = dataset.samples.row(r);
        for ch in 0..c {
            for &v in &row[ch * plane..(ch + 1) * plane] {
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let mut std = vec![0.0; c];
    for ch in 0..c {
        mean[ch] /= count;
        std[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt();
    }
    NormalizationStats::new(mean, std)
}

/// `(x - mean) / std` per channel.
pub fn normalize(dataset: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    let (mean, std) = stats.feature_stats(dataset.width())?;
    let mut out = dataset.clone();
    for r in 0..out.len() {
        let row = out.samples.row_mut(r);
        for j in 0..row.len() {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(dataset: &Dataset, stats: &NormalizationStats) -> Result<Dataset> {
    let (mean, std) = stats.feature_stats(dataset.width())?;
    let mut out = dataset.clone();
    for r in 0..out.len() {
        let row = out.samples.row_mut(r);
        for j in 0..row.len() {
            row[j] = row[j] * std[j] + mean[j];
        }
    }
    Ok(out)
}

/// Denormalizes a single flattened sample.
pub fn denormalize_row(row: &[f64], stats: &NormalizationStats) -> Result<Vec<f64>> {
    let (mean, std) = stats.feature_stats(row.len())?;
    Ok(row
        .iter()
        .enumerate()
        .map(|(j, &v)| v * std[j] + mean[j])
        .collect())
}

/// Synthetic text dataset: random token ids embedded through a fixed
/// standard-normal table, flattened to `seq_len * embed_dim` features.
#[derive(Debug, Clone)]
pub struct TokenDataset {
    pub dataset: Dataset,
    /// `vocab x embed_dim` embedding table, retained for detokenization.
    pub embedding: Matrix,
    pub tokens: Vec<Vec<u32>>,
}

pub fn synthetic_tokens(
    n: usize,
    seq_len: usize,
    vocab: usize,
    embed_dim: usize,
    rng: &mut RngStream,
) -> Result<TokenDataset> {
    if vocab < 2 {
        return Err(Error::InvalidConfig("vocabulary must hold at least 2 tokens".into()));
    }
    let embedding = rng.normal_matrix(vocab, embed_dim);
    let mut samples = Matrix::zeros(n, seq_len * embed_dim);
    let mut tokens = Vec::with_capacity(n);
    for r in 0..n {
        let ids: Vec<u32> = (0..seq_len).map(|_| rng.index(vocab) as u32).collect();
        let row = samples.row_mut(r);
        for (slot, &id) in ids.iter().enumerate() {
            row[slot * embed_dim..(slot + 1) * embed_dim]
                .copy_from_slice(embedding.row(id as usize));
        }
        tokens.push(ids);
    }
    let num_classes = 2;
    let labels = (0..n).map(|_| rng.index(num_classes)).collect();
    Ok(TokenDataset {
        dataset: Dataset {
            samples,
            labels,
            layout: DataLayout::Tokens { seq_len, embed_dim },
            num_classes,
        },
        embedding,
        tokens,
    })
}

/// Nearest-embedding-row lookup per token slot.
pub fn detokenize(row: &[f64], embedding: &Matrix) -> Result<Vec<u32>> {
    let dim = embedding.cols();
    if dim == 0 || row.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "row length {} not a multiple of embedding dim {dim}",
            row.len()
        )));
    }
    let mut out = Vec::with_capacity(row.len() / dim);
    for slot in row.chunks_exact(dim) {
        let mut best = (0u32, f64::INFINITY);
        for id in 0..embedding.rows() {
            let e = embedding.row(id);
            let mut d = 0.0;
            for (a, b) in slot.iter().zip(e) {
                d += (a - b) * (a - b);
                if d >= best.1 {
                    break;
                }
            }
            if d < best.1 {
                best = (id as u32, d);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6) from a channel-major RGB image with values in [0, 1].
pub fn write_ppm(path: &Path, rgb: &[f64], height: usize, width: usize) -> Result<()> {
    if rgb.len() != 3 * height * width {
        return Err(Error::ShapeMismatch(format!(
            "expected 3x{height}x{width} values, got {}",
            rgb.len()
        )));
    }
    let plane = height * width;
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{width} {height}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        bytes.push(to_byte(rgb[p]));
        bytes.push(to_byte(rgb[plane + p]));
        bytes.push(to_byte(rgb[2 * plane + p]));
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Binary PGM (P5) from a grayscale image with values in [0, 1].
pub fn write_pgm(path: &Path, gray: &[f64], height: usize, width: usize) -> Result<()> {
    if gray.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "expected {height}x{width} values, got {}",
            gray.len()
        )));
    }
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = gray.iter().map(|&v| to_byte(v)).collect();
    file.write_all(&bytes)?;
    Ok(())
}
