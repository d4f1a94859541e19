//! Synthetic classification datasets and a flat binary file loader.
//!
//! The synthetic generator draws class-conditional Gaussian clusters with
//! unit noise whose means are `separation` apart, so difficulty is a single
//! knob: `separation = 0` collapses every class onto the same cloud while
//! large separations are trivially linearly separable. Everything is
//! deterministic per seed. The first 80% of examples form the training
//! split, the rest validation.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Magic tag of the flat binary dataset format.
pub const DATASET_MAGIC: u32 = 0x4453_4554;

/// Examples with integer labels, pre-split into train and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor, // [examples, input_dim]
    labels: Vec<usize>,
    classes: usize,
    train_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (examples, _) = match features.shape() {
            [e, d] => (*e, *d),
            other => {
                return Err(Error::Dataset(format!(
                    "features must be [examples, input_dim], got {other:?}"
                )))
            }
        };
        if labels.len() != examples {
            return Err(Error::Dataset(format!(
                "{} labels for {examples} examples",
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Dataset(format!("need >= 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range 0..{classes}")));
        }
        if let Some(index) = features.first_nonfinite() {
            return Err(Error::NonFinite { context: "dataset features", index });
        }
        let train_count = examples * 8 / 10;
        if train_count == 0 || train_count == examples {
            return Err(Error::Dataset(format!(
                "{examples} examples cannot form non-empty 80/20 splits"
            )));
        }
        Ok(Self { features, labels, classes, train_count })
    }

    pub fn examples(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of training examples; they occupy indices `0..train_count`.
    pub fn train_count(&self) -> usize {
        self.train_count
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.train_count..self.examples()
    }

    /// Materialize a batch by example index.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), dim], data).expect("consistent dims"),
            labels,
        )
    }
}

/// Class-conditional Gaussian clusters with unit noise and pairwise mean
/// distance `separation`. When the input dimension allows, class means sit
/// on orthogonal axes (exact spacing); otherwise random directions are used.
pub fn make_synthetic(
    rng: &mut Rng,
    classes: usize,
    examples: usize,
    input_dim: usize,
    separation: f64,
) -> Result<Dataset> {
    if separation.is_nan() || separation < 0.0 {
        return Err(Error::Dataset(format!("separation must be >= 0, got {separation}")));
    }
    if examples < classes {
        return Err(Error::Dataset(format!(
            "need >= {classes} examples for {classes} classes, got {examples}"
        )));
    }
    let mut mean_rng = rng.substream(1);
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut m = vec![0.0; input_dim];
            if classes <= input_dim {
                m[c] = radius;
            } else {
                let dir = mean_rng.normal_tensor(&[input_dim], 0.0, 1.0);
                let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for (mj, &dj) in m.iter_mut().zip(dir.data()) {
                    *mj = radius * dj / norm;
                }
            }
            m
        })
        .collect();

    let mut sample_rng = rng.substream(2);
    let mut data = Vec::with_capacity(examples * input_dim);
    let mut labels = Vec::with_capacity(examples);
    for _ in 0..examples {
        let label = sample_rng.next_below(classes as u64) as usize;
        labels.push(label);
        for &mj in &means[label] {
            data.push(mj + sample_rng.normal(0.0, 1.0));
        }
    }
    Dataset::new(
        Tensor::new(vec![examples, input_dim], data).expect("consistent dims"),
        labels,
        classes,
    )
}

/// Load the flat binary format: header `{u32 magic, u32 examples, u32
/// input_dim, u32 classes}` (little-endian), then row-major f32 features,
/// then u16 labels.
pub fn load_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_file(&bytes)
}

fn parse_file(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 {
        return Err(Error::Dataset(format!("file too short: {} bytes", bytes.len())));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("len checked"));
    let magic = u32_at(0);
    if magic != DATASET_MAGIC {
        return Err(Error::Dataset(format!("bad magic {magic:#010x}")));
    }
    let examples = u32_at(4) as usize;
    let input_dim = u32_at(8) as usize;
    let classes = u32_at(12) as usize;
    if examples == 0 || input_dim == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let feat_bytes = examples
        .checked_mul(input_dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Dataset("dataset dimensions overflow".into()))?;
    let expected = 16 + feat_bytes + examples * 2;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "expected {expected} bytes for {examples}x{input_dim}, got {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(examples * input_dim);
    for i in 0..examples * input_dim {
        let at = 16 + i * 4;
        data.push(f64::from(f32::from_le_bytes(
            bytes[at..at + 4].try_into().expect("len checked"),
        )));
    }
    let mut labels = Vec::with_capacity(examples);
    for i in 0..examples {
        let at = 16 + feat_bytes + i * 2;
        labels.push(u16::from_le_bytes(bytes[at..at + 2].try_into().expect("len checked")) as usize);
    }
    Dataset::new(
        Tensor::new(vec![examples, input_dim], data).expect("consistent dims"),
        labels,
        classes,
    )
}

/// Writer counterpart of [`load_file`]; features are narrowed to f32.
pub fn save_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + dataset.features.len() * 4 + dataset.examples() * 2);
    bytes.extend_from_slice(&DATASET_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(dataset.examples() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dataset.input_dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dataset.classes() as u32).to_le_bytes());
    for &v in dataset.features.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &dataset.labels {
        bytes.extend_from_slice(&(l as u16).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}
