//! Datasets: two-class spirals, a synthetic token-sequence task, and IDX
//! ubyte files.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{HotError, Result};
use crate::linalg::{Matrix, Rng};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

/// Samples with one label each. A sample spans `seq_len` consecutive input
/// rows (1 for flat features).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seq_len: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || inputs.rows() != labels.len() * seq_len {
            return Err(HotError::Data(format!(
                "{} input rows do not match {} labels of {seq_len} rows each",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(HotError::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            seq_len,
            name: String::new(),
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, samples: &[usize]) -> Batch {
        let rows: Vec<usize> = samples
            .iter()
            .flat_map(|&s| s * self.seq_len..(s + 1) * self.seq_len)
            .collect();
        Batch {
            inputs: self.inputs.select_rows(&rows),
            labels: samples.iter().map(|&s| self.labels[s]).collect(),
        }
    }

    /// Consecutive batches over `order`; the last one may be short.
    pub fn batches(&self, order: &[usize], batch_size: usize) -> Vec<Batch> {
        order.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn map_inputs(self, f: impl FnOnce(&Matrix) -> Matrix) -> Result<Self> {
        let inputs = f(&self.inputs);
        let name = self.name.clone();
        Ok(Dataset::new(inputs, self.labels, self.num_classes, self.seq_len)?.named(name))
    }
}

/// Two interleaved spirals, `n / 2` points of class 0 and the rest of class
/// 1 (each point of class 1 is a class-0 point rotated by π), radius in
/// `(0, 1]`, 1.5 turns, Gaussian noise of standard deviation `noise`.
pub fn make_spirals(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(HotError::Data("spirals need at least two points".into()));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let per_class = [n / 2, n - n / 2];
    for (class, &count) in per_class.iter().enumerate() {
        for i in 0..count {
            let t = (i + 1) as f64 / count as f64;
            let theta = 3.0 * PI * t + PI * class as f64;
            let x = t * theta.cos() + noise * rng.standard_normal();
            let y = t * theta.sin() + noise * rng.standard_normal();
            data.push(x as f32);
            data.push(y as f32);
            labels.push(class);
        }
    }
    Dataset::new(Matrix::new(n, 2, data)?, labels, 2, 1).map(|d| d.named("spirals"))
}

/// Fixed random Fourier features `[sin(2π·x·B), cos(2π·x·B)]` with
/// `B ~ N(0, scale²)`, lifting low-dimensional points to `out_dim` columns.
pub fn fourier_features(x: &Matrix, out_dim: usize, scale: f64, seed: u64) -> Result<Matrix> {
    if out_dim == 0 || !out_dim.is_multiple_of(2) {
        return Err(HotError::invalid("fourier feature width must be even and positive"));
    }
    let half = out_dim / 2;
    let mut rng = Rng::new(seed);
    let b: Vec<f64> = (0..x.cols() * half).map(|_| scale * rng.standard_normal()).collect();
    Ok(Matrix::from_fn(x.rows(), out_dim, |i, j| {
        let k = j % half;
        let proj: f64 = (0..x.cols()).map(|c| x.get(i, c) as f64 * b[c * half + k]).sum();
        let phase = 2.0 * PI * proj;
        (if j < half { phase.sin() } else { phase.cos() }) as f32
    }))
}

/// Sequences of `seq_len` tokens with `dim` features; the label says whether
/// the first feature's mean over the sequence is positive.
pub fn make_token_task(n: usize, seq_len: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || seq_len == 0 || dim == 0 {
        return Err(HotError::Data("token task dimensions must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let mut inputs = Matrix::zeros(n * seq_len, dim);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let class = s % 2;
        let shift = if class == 1 { 0.5 } else { -0.5 };
        for t in 0..seq_len {
            for (j, v) in inputs.row_mut(s * seq_len + t).iter_mut().enumerate() {
                let mean = if j == 0 { shift } else { 0.0 };
                *v = (mean + rng.standard_normal()) as f32;
            }
        }
        labels.push(class);
    }
    Dataset::new(inputs, labels, 2, seq_len).map(|d| d.named("tokens"))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| HotError::Data(format!("{what}: truncated header")))
}

/// Loads an IDX image file (`0x00000803`, dims `n, rows, cols`) and its label
/// file (`0x00000801`, dim `n`). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    let magic = be_u32(&img, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(HotError::Data(format!("images: bad magic {magic:#010x}")));
    }
    let magic = be_u32(&lab, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(HotError::Data(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(&img, 4, "images")? as usize;
    let rows = be_u32(&img, 8, "images")? as usize;
    let cols = be_u32(&img, 12, "images")? as usize;
    let nl = be_u32(&lab, 4, "labels")? as usize;
    if n != nl {
        return Err(HotError::Data(format!("{n} images but {nl} labels")));
    }
    let feat = rows * cols;
    let pixels = img
        .get(16..16 + n * feat)
        .ok_or_else(|| HotError::Data("images: truncated payload".into()))?;
    let label_bytes = lab
        .get(8..8 + n)
        .ok_or_else(|| HotError::Data("labels: truncated payload".into()))?;
    let inputs = Matrix::new(n, feat, pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes, 1).map(|d| d.named("idx"))
}

/// Writes `n` images of `rows × cols` bytes and their labels as IDX files.
pub fn write_idx(images: &Path, labels: &Path, pixels: &[u8], rows: usize, cols: usize, label_bytes: &[u8]) -> Result<()> {
    let n = label_bytes.len();
    if pixels.len() != n * rows * cols {
        return Err(HotError::Data("pixel count does not match labels × rows × cols".into()));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(label_bytes);
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}
