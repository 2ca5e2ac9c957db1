//! Synthetic per-owner classification data.
//!
//! All owners share one task: Gaussian class blobs whose means are drawn from
//! the task seed. Each owner then sees its own samples with additive Gaussian
//! feature noise. Clean features live in `[0, 1]` per dimension, so the noise
//! MSE is on the same scale and `1 − MSE` is a usable quality score.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::market::DataOwner;

/// Class means are drawn uniformly from this box.
pub const CLASS_MEAN_RANGE: (f64, f64) = (0.1, 0.9);
/// Per-dimension standard deviation of clean samples around their class mean.
pub const CLASS_SPREAD: f64 = 0.05;

const TASK_STREAM: u64 = 0;
const VALIDATION_STREAM: u64 = u64::MAX;

/// Row-major labeled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dims: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn select(&self, indices: &[usize]) -> Samples {
        let mut features = Vec::with_capacity(indices.len() * self.dims);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Samples {
            dims: self.dims,
            classes: self.classes,
            features,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwnerDataset {
    pub owner: usize,
    /// Noisy samples the owner actually holds.
    pub samples: Samples,
    /// The same samples before noise was added.
    pub clean_features: Vec<f64>,
    pub noise_intensity: f64,
    /// `1 − MSE(noisy, clean)`, clamped to `[0, 1]`.
    pub initial_quality: f64,
    /// Set when the raw MSE exceeded 1 and the quality was clamped to 0.
    pub quality_clamped: bool,
}

impl OwnerDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One row per sample: owner id, features, label.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "owner")?;
        for j in 0..self.samples.dims {
            write!(out, ",x{j}")?;
        }
        writeln!(out, ",label")?;
        for i in 0..self.samples.len() {
            write!(out, "{}", self.owner)?;
            for v in self.samples.row(i) {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out, ",{}", self.samples.labels[i])?;
        }
        Ok(())
    }
}

fn check_shape(samples: usize, dims: usize, classes: usize) -> Result<()> {
    if samples < 1 || dims < 1 || classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need samples >= 1, dims >= 1, classes >= 2 (got {samples}, {dims}, {classes})"
        )));
    }
    Ok(())
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class means of the task identified by `seed`, `classes × dims` row-major.
pub fn class_means(seed: u64, dims: usize, classes: usize) -> Vec<f64> {
    let mut rng = stream(seed, TASK_STREAM);
    let (lo, hi) = CLASS_MEAN_RANGE;
    (0..dims * classes).map(|_| rng.random_range(lo..hi)).collect()
}

fn draw_clean(rng: &mut ChaCha8Rng, means: &[f64], samples: usize, dims: usize, classes: usize) -> Samples {
    let spread = Normal::new(0.0, CLASS_SPREAD).expect("finite spread");
    let mut features = Vec::with_capacity(samples * dims);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let k = rng.random_range(0..classes);
        labels.push(k);
        for j in 0..dims {
            let v: f64 = means[k * dims + j] + spread.sample(rng);
            features.push(v.clamp(0.0, 1.0));
        }
    }
    Samples {
        dims,
        classes,
        features,
        labels,
    }
}

/// Generate an owner's data pool. Deterministic in `(seed, owner.id)`.
pub fn generate_owner_data(
    seed: u64,
    owner: &DataOwner,
    noise_intensity: f64,
    samples: usize,
    dims: usize,
    classes: usize,
) -> Result<OwnerDataset> {
    check_shape(samples, dims, classes)?;
    if !(noise_intensity >= 0.0 && noise_intensity.is_finite()) {
        return Err(Error::InvalidInput(format!("noise intensity {noise_intensity}")));
    }
    let means = class_means(seed, dims, classes);
    let mut rng = stream(seed, owner.id as u64 + 1);
    let clean = draw_clean(&mut rng, &means, samples, dims, classes);
    let mut noisy = clean.clone();
    if noise_intensity > 0.0 {
        let noise = Normal::new(0.0, noise_intensity).expect("finite noise");
        for v in noisy.features.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let mse = clean
        .features
        .iter()
        .zip(&noisy.features)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / clean.features.len() as f64;
    let quality_clamped = mse > 1.0;
    Ok(OwnerDataset {
        owner: owner.id,
        samples: noisy,
        clean_features: clean.features,
        noise_intensity,
        initial_quality: (1.0 - mse).clamp(0.0, 1.0),
        quality_clamped,
    })
}

/// Noise-free held-out samples of the task identified by `seed`.
pub fn validation_set(seed: u64, samples: usize, dims: usize, classes: usize) -> Result<Samples> {
    check_shape(samples, dims, classes)?;
    let means = class_means(seed, dims, classes);
    let mut rng = stream(seed, VALIDATION_STREAM);
    Ok(draw_clean(&mut rng, &means, samples, dims, classes))
}

/// Seeded draw order over an owner's pool. Taking a prefix of it is a
/// uniform subsample without replacement; growing the prefix draws extra
/// samples from what is left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePool {
    order: Vec<usize>,
    taken: usize,
}

impl SamplePool {
    pub fn new(size: usize, seed: u64, owner: usize) -> Self {
        let mut order: Vec<usize> = (0..size).collect();
        let mut rng = stream(seed ^ 0x5eed_5a3b_1e00_0000, owner as u64 + 1);
        order.shuffle(&mut rng);
        Self { order, taken: 0 }
    }

    pub fn taken(&self) -> usize {
        self.taken
    }

    pub fn capacity(&self) -> usize {
        self.order.len()
    }

    /// Grow the drawn set to `count` samples (never shrinks). Returns the
    /// number of newly drawn samples.
    pub fn draw_to(&mut self, count: usize) -> usize {
        let target = count.min(self.order.len()).max(self.taken);
        let added = target - self.taken;
        self.taken = target;
        added
    }

    pub fn indices(&self) -> &[usize] {
        &self.order[..self.taken]
    }
}
