//! Datasets: synthetic generators and an IDX (MNIST-style) loader.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Labelled samples; `inputs` has shape `[n, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Train/validation pair produced by [`Dataset::split`].
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "dataset inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Contiguous samples `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        let (inputs, labels) = self.batch(&idx);
        Dataset {
            inputs,
            labels,
            classes: self.classes,
        }
    }

    /// The last `round(n·val_fraction)` samples become the validation set.
    pub fn split(&self, val_fraction: f64) -> Result<DataSplit> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let cut = self.len() - n_val;
        Ok(DataSplit {
            train: self.range(0, cut),
            val: self.range(cut, self.len()),
        })
    }

    /// First `n` samples, used to calibrate activation ranges.
    pub fn calibration_subset(&self, n: usize) -> Dataset {
        self.range(0, n)
    }

    /// Copy with labels drawn uniformly at random.
    pub fn with_random_labels(&self, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let labels = (0..self.len()).map(|_| rng.below(self.classes)).collect();
        Dataset {
            inputs: self.inputs.clone(),
            labels,
            classes: self.classes,
        }
    }
}

/// Isotropic Gaussian clusters around random centres. Centres are drawn with standard
/// deviation `spread` and shifted by `offset` so that inputs have a nonzero mean.
pub fn gaussian_blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 {
        return Err(Error::invalid("gaussian_blobs needs dim ≥ 1 and ≥ 2 classes"));
    }
    let mut rng = Rng::new(seed);
    let offset = 0.5;
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| offset + spread * rng.normal()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &m in &centres[c] {
            data.push(m + rng.normal());
        }
    }
    shuffled(Tensor::new(vec![n, dim], data)?, labels, classes, &mut rng)
}

/// Procedural `size × size` single-channel images in four classes: horizontal stripes,
/// vertical stripes, diagonal stripes and spots. Period, phase, contrast and pixel noise
/// vary per sample.
pub fn pattern_images(n: usize, size: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if size < 4 {
        return Err(Error::invalid("pattern_images needs size ≥ 4"));
    }
    let classes = 4;
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        let period = rng.uniform(3.0, 6.0);
        let phase = rng.uniform(0.0, tau);
        let phase2 = rng.uniform(0.0, tau);
        let contrast = rng.uniform(0.5, 1.0);
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let wave = match c {
                    0 => (tau * yf / period + phase).sin(),
                    1 => (tau * xf / period + phase).sin(),
                    2 => (tau * (xf + yf) / (period * std::f64::consts::SQRT_2) + phase).sin(),
                    _ => (tau * xf / period + phase).sin() * (tau * yf / period + phase2).sin(),
                };
                data.push(0.5 + 0.5 * contrast * wave + noise * rng.normal());
            }
        }
    }
    shuffled(Tensor::new(vec![n, 1, size, size], data)?, labels, classes, &mut rng)
}

fn shuffled(inputs: Tensor, labels: Vec<usize>, classes: usize, rng: &mut Rng) -> Result<Dataset> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    rng.shuffle(&mut order);
    let ds = Dataset::new(inputs, labels, classes)?;
    let (inputs, labels) = ds.batch(&order);
    Dataset::new(inputs, labels, classes)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Loads an IDX image file (`u8`, rank 3) and its label file (`u8`, rank 1). Pixels are
/// scaled to `[0, 1]`; the result has shape `[n, 1, rows, cols]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    if be_u32(&img, 0)? != IDX_IMAGES {
        return Err(Error::Format(format!("{}: not an IDX image file", images.display())));
    }
    if be_u32(&lab, 0)? != IDX_LABELS {
        return Err(Error::Format(format!("{}: not an IDX label file", labels.display())));
    }
    let n = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let n_labels = be_u32(&lab, 4)? as usize;
    if n != n_labels {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }
    let pixels = img
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::Format("truncated IDX image payload".into()))?;
    let label_bytes = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("truncated IDX label payload".into()))?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| l as usize).collect();
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, classes)
}
