//! Dense row-major FP32 matrices.
//!
//! Products accumulate in FP64 and round once to FP32, which keeps the
//! full-precision backward a stable reference for tight tolerances.

mod rng;

use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{HotError, Result};

pub use rng::Rng;

const MATRIX_MAGIC: &[u8; 4] = b"HOTM";

/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HotError::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows; panics on ragged input (test and fixture helper).
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(HotError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n, k) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0f32; m * k];
        if k == 0 {
            return Matrix::new(m, k, out);
        }
        let row_kernel = |(i, out_row): (usize, &mut [f32])| {
            let mut acc = vec![0.0f64; k];
            let a_row = &self.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                let b_row = &other.data[p * k..(p + 1) * k];
                for (acc_j, &b) in acc.iter_mut().zip(b_row) {
                    *acc_j += a * b as f64;
                }
            }
            for (o, a) in out_row.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        };
        if m * n * k >= PARALLEL_THRESHOLD {
            out.par_chunks_mut(k).enumerate().for_each(row_kernel);
        } else {
            out.chunks_mut(k).enumerate().for_each(row_kernel);
        }
        Matrix::new(m, k, out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(HotError::Shape {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n, k) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0f32; m * k];
        if k == 0 {
            return Matrix::new(m, k, out);
        }
        let row_kernel = |(i, out_row): (usize, &mut [f32])| {
            let a_row = &self.data[i * n..(i + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * n..(j + 1) * n];
                let dot: f64 = a_row
                    .iter()
                    .zip(b_row)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                *o = dot as f32;
            }
        };
        if m * n * k >= PARALLEL_THRESHOLD {
            out.par_chunks_mut(k).enumerate().for_each(row_kernel);
        } else {
            out.chunks_mut(k).enumerate().for_each(row_kernel);
        }
        Matrix::new(m, k, out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Matrix {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(HotError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard_product(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard_product", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(HotError::Shape {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Largest element-wise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// ‖self − other‖_F / ‖other‖_F, or the absolute norm when `other` is zero.
    pub fn relative_error(&self, reference: &Matrix) -> f64 {
        assert_eq!(self.shape(), reference.shape(), "relative_error shape mismatch");
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column sums accumulated in FP64.
    pub fn column_sums(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Matrix> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MATRIX_MAGIC {
            return Err(HotError::Format(format!("bad matrix magic {magic:?}")));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::new(rows, cols, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn transpose(a: &Matrix) -> Matrix {
    a.transpose()
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, dist: Distribution) -> Result<Matrix> {
    match dist {
        Distribution::Uniform { lo, hi } => {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(HotError::invalid(format!("uniform({lo}, {hi})")));
            }
            Ok(Matrix::from_fn(rows, cols, |_, _| rng.uniform(lo, hi) as f32))
        }
        Distribution::Normal { mean, std } => {
            if !(mean.is_finite() && std.is_finite()) || std < 0.0 {
                return Err(HotError::invalid(format!("normal({mean}, {std})")));
            }
            Ok(Matrix::from_fn(rows, cols, |_, _| rng.normal(mean, std) as f32))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn identity_product() {
        let mut rng = Rng::new(1);
        let b = random_matrix(&mut rng, 3, 3, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap();
        assert_eq!(Matrix::identity(3).matmul(&b).unwrap(), b);
        assert_eq!(b.matmul(&Matrix::identity(3)).unwrap(), b);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[5.0], [6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[[17.0], [39.0]]));
    }

    #[test]
    fn empty_product() {
        let a = Matrix::zeros(0, 4);
        let b = Matrix::zeros(4, 3);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (0, 3));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn transpose_cases() {
        let row = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        assert_eq!(row.transpose(), Matrix::from_rows(&[[1.0], [2.0], [3.0]]));
        assert_eq!(Matrix::identity(4).transpose(), Matrix::identity(4));
    }

    #[test]
    fn matmul_transposed_agrees() {
        let mut rng = Rng::new(5);
        let n = Distribution::Normal { mean: 0.0, std: 1.0 };
        let a = random_matrix(&mut rng, 7, 5, n).unwrap();
        let b = random_matrix(&mut rng, 4, 5, n).unwrap();
        assert_eq!(a.matmul_transposed(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
    }

    #[test]
    fn random_matrix_distributions() {
        let mut rng = Rng::new(9);
        let z = random_matrix(&mut rng, 4, 4, Distribution::Normal { mean: 0.0, std: 0.0 }).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let a = random_matrix(&mut Rng::new(11), 8, 8, Distribution::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let b = random_matrix(&mut Rng::new(11), 8, 8, Distribution::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(random_matrix(&mut rng, 1, 1, Distribution::Normal { mean: 0.0, std: -1.0 }).is_err());
        assert!(random_matrix(&mut rng, 1, 1, Distribution::Uniform { lo: 1.0, hi: 0.0 }).is_err());
    }

    #[test]
    fn uniform_mean_law_of_large_numbers() {
        let mut rng = Rng::new(2024);
        let m = random_matrix(&mut rng, 1000, 1000, Distribution::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let mean = m.data().iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn fixture_round_trip() {
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.0, 3.25], [7.0, 8.0]]);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"HOTM");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        let back = Matrix::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Matrix::read_from(&mut bad.as_slice()).is_err());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-4.0f32..4.0, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn identity_associativity(a in small_matrix(3, 4), b in small_matrix(4, 5)) {
            let i = Matrix::identity(4);
            let ab = a.matmul(&b).unwrap();
            prop_assert_eq!(a.matmul(&i).unwrap().matmul(&b).unwrap(), ab.clone());
            prop_assert_eq!(a.matmul(&i.matmul(&b).unwrap()).unwrap(), ab);
        }

        #[test]
        fn transpose_distributes(a in small_matrix(3, 4), b in small_matrix(4, 2)) {
            let lhs = a.matmul(&b).unwrap().transpose();
            let rhs = b.transpose().matmul(&a.transpose()).unwrap();
            prop_assert!(lhs.relative_error(&rhs) <= 1e-6);
            prop_assert_eq!(a.transpose().transpose(), a);
        }
    }
}
