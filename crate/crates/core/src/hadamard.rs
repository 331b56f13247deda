//! Walsh-Hadamard transforms and Hadamard low-rank approximation (HLA).
//!
//! All transforms are orthonormal: every butterfly stage is an unscaled
//! add/sub pair and the `1/sqrt(n)` factor is applied once per tile, so the
//! block transform is symmetric and its own inverse.

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{HotError, Result};
use crate::linalg::Matrix;

/// Largest order accepted by [`build_hadamard`] (`2^12 = 4096`).
pub const MAX_ORDER: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisOrdering {
    /// Two-dimensional low-pass ordering by L1 sequency (a + b, then a, then b).
    LpL1,
    /// One-dimensional sequency (number of sign changes).
    Sequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Transform along the row index (each column is cut into tiles of rows).
    Rows,
    /// Transform along the column index (each row is cut into tiles of columns).
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HadamardConfig {
    pub tile: usize,
    pub rank: usize,
    pub ordering: BasisOrdering,
}

impl Default for HadamardConfig {
    fn default() -> Self {
        Self {
            tile: 16,
            rank: 8,
            ordering: BasisOrdering::LpL1,
        }
    }
}

impl HadamardConfig {
    pub fn new(tile: usize, rank: usize, ordering: BasisOrdering) -> Result<Self> {
        let cfg = Self {
            tile,
            rank,
            ordering,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tile.is_power_of_two() || self.tile > 1 << MAX_ORDER {
            return Err(HotError::invalid(format!(
                "tile {} must be a power of two no larger than {}",
                self.tile,
                1 << MAX_ORDER
            )));
        }
        if self.rank == 0 || self.rank > self.tile {
            return Err(HotError::invalid(format!(
                "rank {} must lie in 1..={}",
                self.rank, self.tile
            )));
        }
        Ok(())
    }

    pub fn with_rank(self, rank: usize) -> Self {
        Self { rank, ..self }
    }

    /// Number of tiles covering `len` elements (the last one zero-padded).
    pub fn tiles(&self, len: usize) -> usize {
        len.div_ceil(self.tile)
    }

    pub fn padded_len(&self, len: usize) -> usize {
        self.tiles(len) * self.tile
    }

    pub fn reduced_len(&self, len: usize) -> usize {
        self.tiles(len) * self.rank
    }
}

/// The retained basis indices of one tile, in retention order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowpassIndexSet {
    pub tile: usize,
    pub indices: Vec<usize>,
}

/// Orthonormal Sylvester Hadamard matrix of size `2^d`, built by the Kronecker
/// recursion `H_d = H_1 ⊗ H_{d-1}`.
pub fn build_hadamard(d: u32) -> Result<Matrix> {
    if d > MAX_ORDER {
        return Err(HotError::invalid(format!(
            "Hadamard order {d} exceeds the guard {MAX_ORDER}"
        )));
    }
    let h1 = [[1.0f64, 1.0], [1.0, -1.0]];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut h = vec![1.0f64];
    let mut n = 1usize;
    for _ in 0..d {
        let m = 2 * n;
        let mut next = vec![0.0f64; m * m];
        for (bi, h1_row) in h1.iter().enumerate() {
            for (bj, &sign) in h1_row.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        next[(bi * n + i) * m + bj * n + j] = s * sign * h[i * n + j];
                    }
                }
            }
        }
        h = next;
        n = m;
    }
    Matrix::new(n, n, h.into_iter().map(|v| v as f32).collect())
}

fn butterflies(v: &mut [f32]) {
    let n = v.len();
    let mut half = 1;
    while half < n {
        for block in v.chunks_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        half *= 2;
    }
    counters::add_fwht((n * n.trailing_zeros() as usize) as u64);
}

/// In-place orthonormal fast Walsh-Hadamard transform.
pub fn fwht_in_place(v: &mut [f32]) -> Result<()> {
    if !v.len().is_power_of_two() {
        return Err(HotError::invalid(format!(
            "fwht length {} is not a power of two",
            v.len()
        )));
    }
    butterflies(v);
    let scale = (1.0 / (v.len() as f64).sqrt()) as f32;
    if v.len() > 1 {
        for x in v.iter_mut() {
            *x *= scale;
        }
    }
    Ok(())
}

pub fn fwht(v: &[f32]) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// Zero-pads `m` along `axis` to `len` (no-op when already that long).
pub fn pad_axis(m: &Matrix, axis: Axis, len: usize) -> Matrix {
    match axis {
        Axis::Rows => {
            if m.rows() == len {
                return m.clone();
            }
            let mut data = m.data().to_vec();
            data.resize(len * m.cols(), 0.0);
            Matrix::new(len, m.cols(), data).expect("padded size")
        }
        Axis::Cols => {
            if m.cols() == len {
                return m.clone();
            }
            Matrix::from_fn(m.rows(), len, |i, j| if j < m.cols() { m.get(i, j) } else { 0.0 })
        }
    }
}

/// Keeps the first `len` entries along `axis`.
pub fn crop_axis(m: &Matrix, axis: Axis, len: usize) -> Matrix {
    match axis {
        Axis::Rows if m.rows() == len => m.clone(),
        Axis::Rows => m.slice_rows(0, len),
        Axis::Cols if m.cols() == len => m.clone(),
        Axis::Cols => Matrix::from_fn(m.rows(), len, |i, j| m.get(i, j)),
    }
}

fn axis_len(m: &Matrix, axis: Axis) -> usize {
    match axis {
        Axis::Rows => m.rows(),
        Axis::Cols => m.cols(),
    }
}

/// Block-diagonal Hadamard transform: consecutive tiles of `cfg.tile` entries
/// along `axis` are transformed independently. The axis is zero-padded to a
/// tile multiple and the padded shape is returned.
pub fn block_ht(m: &Matrix, axis: Axis, cfg: &HadamardConfig) -> Matrix {
    let tile = cfg.tile;
    let mut out = pad_axis(m, axis, cfg.padded_len(axis_len(m, axis)));
    let scale = (1.0 / (tile as f64).sqrt()) as f32;
    match axis {
        Axis::Cols => {
            for row_idx in 0..out.rows() {
                for chunk in out.row_mut(row_idx).chunks_mut(tile) {
                    butterflies(chunk);
                    if tile > 1 {
                        chunk.iter_mut().for_each(|x| *x *= scale);
                    }
                }
            }
        }
        Axis::Rows => {
            // Butterflies act on whole rows; each row pair costs 2·cols add/subs.
            let cols = out.cols();
            for block in out.data_mut().chunks_mut(tile * cols) {
                let mut half = 1;
                while half < tile {
                    for pair in block.chunks_mut(2 * half * cols) {
                        let (lo, hi) = pair.split_at_mut(half * cols);
                        for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                            let (x, y) = (*a, *b);
                            *a = x + y;
                            *b = x - y;
                        }
                    }
                    half *= 2;
                }
                counters::add_fwht((tile * tile.trailing_zeros() as usize * cols) as u64);
                if tile > 1 {
                    block.iter_mut().for_each(|x| *x *= scale);
                }
            }
        }
    }
    out
}

/// Number of sign changes along row `k` of the Sylvester matrix of size `n`.
pub fn sequency(k: usize, n: usize) -> usize {
    let sign = |j: usize| (k & j).count_ones() % 2;
    (1..n).filter(|&j| sign(j) != sign(j - 1)).count()
}

pub fn lowpass_indices(cfg: &HadamardConfig) -> LowpassIndexSet {
    let tile = cfg.tile;
    let mut order: Vec<usize> = (0..tile).collect();
    match cfg.ordering {
        BasisOrdering::Sequency => order.sort_by_key(|&i| sequency(i, tile)),
        BasisOrdering::LpL1 => {
            // A tile of 2^d entries is read as a 2^(d/2) x 2^(d - d/2) patch;
            // row i of H_d factors as row (i / cols) ⊗ row (i % cols).
            let d = tile.trailing_zeros();
            let grid_rows = 1usize << (d / 2);
            let grid_cols = tile / grid_rows;
            order.sort_by_key(|&i| {
                let a = sequency(i / grid_cols, grid_rows);
                let b = sequency(i % grid_cols, grid_cols);
                (a + b, a, b)
            });
        }
    }
    order.truncate(cfg.rank);
    LowpassIndexSet {
        tile,
        indices: order,
    }
}

/// Transforms along `axis` and keeps the low-pass coefficients of each tile,
/// shrinking that axis from `len` to `tiles(len) · rank`.
pub fn hla_reduce(m: &Matrix, axis: Axis, cfg: &HadamardConfig) -> Matrix {
    let transformed = block_ht(m, axis, cfg);
    let keep = lowpass_indices(cfg).indices;
    let tiles = cfg.tiles(axis_len(m, axis));
    match axis {
        Axis::Rows => {
            let rows: Vec<usize> = (0..tiles)
                .flat_map(|t| keep.iter().map(move |&k| t * cfg.tile + k))
                .collect();
            transformed.select_rows(&rows)
        }
        Axis::Cols => {
            let reduced = tiles * cfg.rank;
            Matrix::from_fn(transformed.rows(), reduced, |i, j| {
                let (t, k) = (j / cfg.rank, keep[j % cfg.rank]);
                transformed.get(i, t * cfg.tile + k)
            })
        }
    }
}

/// Scatters reduced coefficients back to their basis positions, inverts the
/// block transform and crops to `original_len` along `axis`.
pub fn hla_lift(
    reduced: &Matrix,
    axis: Axis,
    cfg: &HadamardConfig,
    original_len: usize,
) -> Result<Matrix> {
    let expected = cfg.reduced_len(original_len);
    let got = axis_len(reduced, axis);
    if got != expected {
        return Err(HotError::invalid(format!(
            "hla_lift: reduced length {got} does not match {expected} for original length {original_len}"
        )));
    }
    let keep = lowpass_indices(cfg).indices;
    let padded = cfg.padded_len(original_len);
    let mut full = match axis {
        Axis::Rows => Matrix::zeros(padded, reduced.cols()),
        Axis::Cols => Matrix::zeros(reduced.rows(), padded),
    };
    match axis {
        Axis::Rows => {
            for r in 0..expected {
                let target = (r / cfg.rank) * cfg.tile + keep[r % cfg.rank];
                full.row_mut(target).copy_from_slice(reduced.row(r));
            }
        }
        Axis::Cols => {
            for i in 0..reduced.rows() {
                for c in 0..expected {
                    let target = (c / cfg.rank) * cfg.tile + keep[c % cfg.rank];
                    full.set(i, target, reduced.get(i, c));
                }
            }
        }
    }
    let restored = block_ht(&full, axis, cfg);
    Ok(crop_axis(&restored, axis, original_len))
}
