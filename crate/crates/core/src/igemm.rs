//! Simulated integer GEMM over INT8 / packed INT4 codes with 32-bit
//! accumulators, plus scale application back to FP32.

use rayon::prelude::*;

use crate::counters;
use crate::error::{HotError, Result};
use crate::linalg::Matrix;
use crate::quantizer::{Granularity, QParams, QuantTensor};

/// Largest contracted dimension for which `N · 127²` fits in an `i32`.
pub const MAX_INNER_DIM: usize = 131_000;

const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl AccumMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, i: usize, k: usize) -> i32 {
        self.data[i * self.cols + k]
    }
}

/// Which operand axis a row-wise scale of `a` lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowScaleMode {
    /// `a` is scaled per output row (factorizes out of the sum).
    OutputRows,
    /// `a` is scaled along the contracted dimension (does not factorize).
    Contracted,
}

fn check_operands(a: &QuantTensor, b: &QuantTensor) -> Result<()> {
    if a.bits() != b.bits() {
        return Err(HotError::BitWidth(a.bits().width(), b.bits().width()));
    }
    if a.cols() != b.rows() {
        return Err(HotError::Shape {
            op: "gemm_int",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.cols() > MAX_INNER_DIM {
        return Err(HotError::Overflow(a.cols(), MAX_INNER_DIM));
    }
    Ok(())
}

/// Exact integer product of the code matrices.
pub fn gemm_int(a: &QuantTensor, b: &QuantTensor) -> Result<AccumMatrix> {
    check_operands(a, b)?;
    let (m, n, k) = (a.rows(), a.cols(), b.cols());
    let a_codes = a.codes();
    let b_codes = b.codes();
    let mut data = vec![0i32; m * k];
    if k > 0 {
        let kernel = |(i, out_row): (usize, &mut [i32])| {
            let a_row = &a_codes[i * n..(i + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0 {
                    continue;
                }
                let av = av as i32;
                let b_row = &b_codes[p * k..(p + 1) * k];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv as i32;
                }
            }
        };
        if m * n * k >= PARALLEL_THRESHOLD {
            data.par_chunks_mut(k).enumerate().for_each(kernel);
        } else {
            data.chunks_mut(k).enumerate().for_each(kernel);
        }
    }
    Ok(AccumMatrix {
        rows: m,
        cols: k,
        data,
    })
}

fn output_scale(params: &QParams, idx: usize) -> f64 {
    match params.granularity {
        Granularity::PerTensor => params.scales[0] as f64,
        _ => params.scales[idx] as f64,
    }
}

/// Converts accumulators to FP32: `out[i][k] = (acc · s_a[i]) · s_b[k]`.
///
/// `a` may be per-tensor or per-row (on output rows); `b` may be per-tensor or
/// per-column (on output columns). Scales on the contracted dimension cannot
/// be applied after the sum; use [`gemm_int_rowscaled`].
pub fn apply_scales(
    acc: &AccumMatrix,
    a_params: &QParams,
    b_params: &QParams,
    a_row_scales_on: RowScaleMode,
) -> Result<Matrix> {
    if a_row_scales_on == RowScaleMode::Contracted && a_params.granularity != Granularity::PerTensor {
        return Err(HotError::Granularity(
            "contracted-dimension scales do not factor out of the integer sum".into(),
        ));
    }
    match a_params.granularity {
        Granularity::PerTensor => {}
        Granularity::PerRow if a_params.scales.len() == acc.rows => {}
        g => {
            return Err(HotError::Granularity(format!(
                "left operand granularity {g:?} with {} scales cannot scale {} output rows",
                a_params.scales.len(),
                acc.rows
            )))
        }
    }
    match b_params.granularity {
        Granularity::PerTensor => {}
        Granularity::PerCol if b_params.scales.len() == acc.cols => {}
        g => {
            return Err(HotError::Granularity(format!(
                "right operand granularity {g:?} with {} scales cannot scale {} output columns",
                b_params.scales.len(),
                acc.cols
            )))
        }
    }
    counters::add_dequantized((acc.rows * acc.cols) as u64);
    Ok(Matrix::from_fn(acc.rows, acc.cols, |i, k| {
        ((acc.get(i, k) as f64 * output_scale(a_params, i)) * output_scale(b_params, k)) as f32
    }))
}

/// Integer GEMM whose left operand is scaled along the contracted dimension:
/// `out[i][k] = (Σ_n cs[n] · (a[i][n] · b[n][k])) · s_a · s_b[k]`.
///
/// Each term is an exact integer product; scaled partials accumulate in FP64.
/// When `a` is per-column its scales are the contracted ones and `s_a = 1`;
/// when `a` is per-tensor its scalar multiplies the result.
pub fn gemm_int_rowscaled(
    a: &QuantTensor,
    b: &QuantTensor,
    contracted_scales: &[f32],
) -> Result<Matrix> {
    check_operands(a, b)?;
    let (m, n, k) = (a.rows(), a.cols(), b.cols());
    if contracted_scales.len() != n {
        return Err(HotError::invalid(format!(
            "{} contracted scales for inner dimension {n}",
            contracted_scales.len()
        )));
    }
    let a_rest = match a.qparams().granularity {
        Granularity::PerTensor => a.qparams().scales[0] as f64,
        Granularity::PerCol => 1.0,
        Granularity::PerRow => {
            return Err(HotError::Granularity(
                "left operand of a contracted-scale GEMM cannot also be scaled per row".into(),
            ))
        }
    };
    let b_params = b.qparams();
    if b_params.granularity == Granularity::PerRow {
        return Err(HotError::Granularity(
            "right operand scaled along the contracted dimension is not supported".into(),
        ));
    }
    let a_codes = a.codes();
    let b_codes = b.codes();
    let mut out = vec![0.0f32; m * k];
    if k > 0 {
        let kernel = |(i, out_row): (usize, &mut [f32])| {
            let mut acc = vec![0.0f64; k];
            for p in 0..n {
                let av = a_codes[i * n + p] as i32;
                if av == 0 {
                    continue;
                }
                let s = contracted_scales[p] as f64;
                let b_row = &b_codes[p * k..(p + 1) * k];
                for (slot, &bv) in acc.iter_mut().zip(b_row) {
                    *slot += s * (av * bv as i32) as f64;
                }
            }
            for (col, (o, v)) in out_row.iter_mut().zip(&acc).enumerate() {
                *o = ((v * a_rest) * output_scale(b_params, col)) as f32;
            }
        };
        if m * n * k >= PARALLEL_THRESHOLD {
            out.par_chunks_mut(k).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(k).enumerate().for_each(kernel);
        }
    }
    counters::add_dequantized((m * k) as u64);
    Matrix::new(m, k, out)
}
