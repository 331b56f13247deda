//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use hot_core::linalg::{random_matrix, Distribution, Matrix, Rng};

pub const NORMAL: Distribution = Distribution::Normal { mean: 0.0, std: 1.0 };

pub fn normal(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    random_matrix(rng, r, c, NORMAL).unwrap()
}

/// Orthonormal Sylvester matrix from `H[i][j] = (−1)^popcount(i & j) / √n`.
pub fn dense_hadamard(n: usize) -> Vec<Vec<f64>> {
    let s = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if (i & j).count_ones() % 2 == 0 { s } else { -s })
                .collect()
        })
        .collect()
}

pub fn to_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| v as f64).collect()).collect()
}

pub fn matmul64(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..k)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose64(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = a.first().map_or(0, Vec::len);
    (0..c).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn flatten(a: &[Vec<f64>]) -> Vec<f64> {
    a.iter().flatten().copied().collect()
}

/// `‖approx − exact‖_F / ‖exact‖_F`.
pub fn rel_err(approx: &Matrix, exact: &[f64]) -> f64 {
    let num: f64 = approx.data().iter().zip(exact).map(|(a, e)| (*a as f64 - e).powi(2)).sum();
    let den: f64 = exact.iter().map(|e| e * e).sum();
    (num / den.max(1e-300)).sqrt()
}

fn sign_changes(v: &[f64]) -> usize {
    v.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count()
}

/// Low-pass basis rows: each row of the dense order-n matrix is read as a
/// `2^(d/2) × 2^(d−d/2)` grid, its sign changes along the two grid axes give
/// the 2-D sequency `(a, b)`, rows sort by `(a + b, a, b)`.
pub fn lowpass_rows(n: usize, rank: usize) -> Vec<usize> {
    let h = dense_hadamard(n);
    let d = n.trailing_zeros();
    let gr = 1usize << (d / 2);
    let gc = n / gr;
    let mut keyed: Vec<((usize, usize, usize), usize)> = (0..n)
        .map(|i| {
            let row = &h[i];
            let a = sign_changes(&(0..gr).map(|r| row[r * gc]).collect::<Vec<_>>());
            let b = sign_changes(&row[..gc]);
            ((a + b, a, b), i)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().take(rank).map(|(_, i)| i).collect()
}

/// Block-diagonal projector `ĤᵀĤ` of size `padded × padded`.
pub fn projector(len: usize, n: usize, rank: usize) -> Vec<Vec<f64>> {
    let padded = len.div_ceil(n) * n;
    let h = dense_hadamard(n);
    let keep = lowpass_rows(n, rank);
    let mut p = vec![vec![0.0; padded]; padded];
    for t in 0..padded / n {
        for i in 0..n {
            for j in 0..n {
                p[t * n + i][t * n + j] = keep.iter().map(|&k| h[k][i] * h[k][j]).sum();
            }
        }
    }
    p
}

pub fn pad_rows(a: &[Vec<f64>], len: usize) -> Vec<Vec<f64>> {
    let c = a.first().map_or(0, Vec::len);
    let mut out = a.to_vec();
    out.resize(len, vec![0.0; c]);
    out
}

pub fn pad_cols(a: &[Vec<f64>], len: usize) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(len, 0.0);
            r
        })
        .collect()
}

/// Median of a copy of `v`.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
