//! Backward pass of a linear layer `y = x · wᵀ`.
//!
//! `g_x = g_y · w` runs through block-Hadamard-transformed INT4 operands
//! (the transform cancels because the block matrix is orthonormal and
//! symmetric). `g_w = g_yᵀ · x` runs through operands reduced along the token
//! axis to their low-pass Hadamard coefficients and quantized to INT8. The
//! remaining modes exist for sensitivity studies.

use serde::{Deserialize, Serialize};

use crate::error::{HotError, Result};
use crate::hadamard::{block_ht, hla_lift, hla_reduce, Axis, HadamardConfig};
use crate::igemm::{apply_scales, gemm_int, gemm_int_rowscaled, RowScaleMode};
use crate::linalg::Matrix;
use crate::quantizer::{dequantize, quantize, Bits, Granularity, QuantTensor, Rounding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Int4,
    Int8,
    /// Quantization switched off; the transform path runs in FP32.
    Disabled,
}

impl Precision {
    pub fn bits(self) -> Option<Bits> {
        match self {
            Precision::Int4 => Some(Bits::Int4),
            Precision::Int8 => Some(Bits::Int8),
            Precision::Disabled => None,
        }
    }

    /// Width used by cost accounting; disabled quantization counts as FP32.
    pub fn width(self) -> u32 {
        match self {
            Precision::Int4 => 4,
            Precision::Int8 => 8,
            Precision::Disabled => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GxMode {
    Fp,
    /// Hadamard quantization along the contracted output-channel axis.
    Hq(Precision),
    /// Quantization without any transform (baseline for the HT ablation).
    PlainQuant(Precision),
    /// Low-rank projection of `g_y` along tokens, lifted back after the GEMM.
    ExternalHla,
    /// Low-rank projection of the contracted output-channel axis.
    InternalHla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GwMode {
    Fp,
    /// Low-rank reduction along tokens, then quantization.
    Hla(Precision),
    /// Hadamard quantization along tokens without rank reduction.
    Hq(Precision),
}

/// Scale granularity of `g_y` on the weight-gradient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradGranularity {
    PerTensor,
    PerToken,
}

/// Where per-token scales of `g_y` live in the `g_yᵀ · x` product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAxis {
    /// One scale per (reduced) token, on the contracted dimension.
    Contracted,
    /// One scale per output channel of `g_yᵀ`, applied to GEMM output rows.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackwardConfig {
    pub gx_mode: GxMode,
    pub gw_mode: GwMode,
    pub hadamard: HadamardConfig,
    pub gw_granularity: GradGranularity,
    pub token_axis: TokenAxis,
    /// Granularity of the stored activation (per-tensor or per input channel).
    pub activation_granularity: Granularity,
    pub activation_rounding: Rounding,
    pub grad_rounding: Rounding,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        Self {
            gx_mode: GxMode::Hq(Precision::Int4),
            gw_mode: GwMode::Hla(Precision::Int8),
            hadamard: HadamardConfig::default(),
            gw_granularity: GradGranularity::PerTensor,
            token_axis: TokenAxis::Contracted,
            activation_granularity: Granularity::PerTensor,
            activation_rounding: Rounding::Nearest,
            grad_rounding: Rounding::PseudoStochastic,
        }
    }
}

impl BackwardConfig {
    pub fn fp() -> Self {
        Self {
            gx_mode: GxMode::Fp,
            gw_mode: GwMode::Fp,
            ..Self::default()
        }
    }

    pub fn with_gx(self, gx_mode: GxMode) -> Self {
        Self { gx_mode, ..self }
    }

    pub fn with_gw(self, gw_mode: GwMode) -> Self {
        Self { gw_mode, ..self }
    }

    pub fn with_hadamard(self, hadamard: HadamardConfig) -> Self {
        Self { hadamard, ..self }
    }

    pub fn with_granularity(self, gw_granularity: GradGranularity) -> Self {
        Self {
            gw_granularity,
            ..self
        }
    }

    /// Precision of the stored activation on the weight-gradient path.
    pub fn activation_precision(&self) -> Precision {
        match self.gw_mode {
            GwMode::Hla(p) => p,
            _ => Precision::Disabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `O × rank`.
    pub a: Matrix,
    /// `rank × I`.
    pub b: Matrix,
    pub scaling: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub id: String,
    /// `O × I`.
    pub weight: Matrix,
    pub bias: Option<Vec<f32>>,
    pub lora: Option<LoraAdapter>,
}

impl LinearLayer {
    pub fn new(id: impl Into<String>, weight: Matrix) -> Self {
        Self {
            id: id.into(),
            weight,
            bias: None,
            lora: None,
        }
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.out_features() {
            return Err(HotError::invalid(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                self.out_features()
            )));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn with_lora(mut self, lora: LoraAdapter) -> Result<Self> {
        let (o, i) = self.weight.shape();
        if lora.a.rows() != o || lora.b.cols() != i || lora.a.cols() != lora.b.rows() {
            return Err(HotError::Shape {
                op: "with_lora",
                left: lora.a.shape(),
                right: lora.b.shape(),
            });
        }
        self.lora = Some(lora);
        Ok(self)
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    /// `L × I`.
    pub gx: Matrix,
    /// `O × I`.
    pub gw: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub gx: Matrix,
    pub ga: Matrix,
    pub gb: Matrix,
}

/// Token-reduced activation consumed by the weight-gradient GEMM.
#[derive(Debug, Clone, PartialEq)]
pub enum ReducedActivation {
    Quantized(QuantTensor),
    Exact(Matrix),
}

impl ReducedActivation {
    pub fn rows(&self) -> usize {
        match self {
            ReducedActivation::Quantized(q) => q.rows(),
            ReducedActivation::Exact(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            ReducedActivation::Quantized(q) => q.cols(),
            ReducedActivation::Exact(m) => m.cols(),
        }
    }
}

/// Full-precision forward: `y = x · wᵀ + b + s · (x · Bᵀ) · Aᵀ`.
pub fn forward(layer: &LinearLayer, x: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul_transposed(&layer.weight)?;
    if let Some(lora) = &layer.lora {
        let low = x.matmul_transposed(&lora.b)?;
        let delta = low.matmul_transposed(&lora.a)?.scale(lora.scaling);
        y.add_assign(&delta)?;
    }
    if let Some(bias) = &layer.bias {
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    Ok(y)
}

fn check_backward_shapes(gy: &Matrix, x: Option<&Matrix>, w: Option<&Matrix>) -> Result<()> {
    if let Some(w) = w {
        if gy.cols() != w.rows() {
            return Err(HotError::Shape {
                op: "backward(g_y, w)",
                left: gy.shape(),
                right: w.shape(),
            });
        }
    }
    if let Some(x) = x {
        if gy.rows() != x.rows() {
            return Err(HotError::Shape {
                op: "backward(g_y, x)",
                left: gy.shape(),
                right: x.shape(),
            });
        }
    }
    Ok(())
}

pub fn fp_backward(gy: &Matrix, x: &Matrix, w: &Matrix) -> Result<GradPair> {
    check_backward_shapes(gy, Some(x), Some(w))?;
    Ok(GradPair {
        gx: gy.matmul(w)?,
        gw: gy.transpose().matmul(x)?,
    })
}

/// Product of two operands at the given precision with per-tensor scales.
fn quantized_product(a: &Matrix, b: &Matrix, precision: Precision, rounding: Rounding) -> Result<Matrix> {
    match precision.bits() {
        None => a.matmul(b),
        Some(bits) => {
            let qa = quantize(a, bits, Granularity::PerTensor, rounding)?;
            let qb = quantize(b, bits, Granularity::PerTensor, rounding)?;
            let acc = gemm_int(&qa, &qb)?;
            apply_scales(&acc, qa.qparams(), qb.qparams(), RowScaleMode::OutputRows)
        }
    }
}

/// Activation gradient `g_x ≈ g_y · w` under `cfg.gx_mode`.
pub fn hot_gx(gy: &Matrix, w: &Matrix, cfg: &BackwardConfig) -> Result<Matrix> {
    check_backward_shapes(gy, None, Some(w))?;
    let h = &cfg.hadamard;
    match cfg.gx_mode {
        GxMode::Fp => gy.matmul(w),
        GxMode::Hq(precision) => {
            let gy_t = block_ht(gy, Axis::Cols, h);
            let w_t = block_ht(w, Axis::Rows, h);
            quantized_product(&gy_t, &w_t, precision, cfg.grad_rounding)
        }
        GxMode::PlainQuant(precision) => quantized_product(gy, w, precision, cfg.grad_rounding),
        GxMode::ExternalHla => {
            let reduced = hla_reduce(gy, Axis::Rows, h).matmul(w)?;
            hla_lift(&reduced, Axis::Rows, h, gy.rows())
        }
        GxMode::InternalHla => {
            let gy_r = hla_reduce(gy, Axis::Cols, h);
            let w_r = hla_reduce(w, Axis::Rows, h);
            gy_r.matmul(&w_r)
        }
    }
}

/// Reduces `x` along tokens and quantizes it as the weight-gradient path
/// expects; the activation buffer stores exactly this value.
pub fn reduce_activation(x: &Matrix, cfg: &BackwardConfig) -> Result<ReducedActivation> {
    if cfg.activation_granularity == Granularity::PerRow {
        return Err(HotError::Granularity(
            "stored activations cannot be scaled along the contracted token axis".into(),
        ));
    }
    let reduced = hla_reduce(x, Axis::Rows, &cfg.hadamard);
    Ok(match cfg.activation_precision().bits() {
        None => ReducedActivation::Exact(reduced),
        Some(bits) => ReducedActivation::Quantized(quantize(
            &reduced,
            bits,
            cfg.activation_granularity,
            cfg.activation_rounding,
        )?),
    })
}

/// Weight gradient from a token-reduced activation of `original_len` rows.
pub fn gw_from_reduced(
    gy: &Matrix,
    x_reduced: &ReducedActivation,
    original_len: usize,
    cfg: &BackwardConfig,
) -> Result<Matrix> {
    let h = &cfg.hadamard;
    if gy.rows() != original_len || x_reduced.rows() != h.reduced_len(original_len) {
        return Err(HotError::Shape {
            op: "gw_from_reduced",
            left: gy.shape(),
            right: (x_reduced.rows(), x_reduced.cols()),
        });
    }
    let precision = match cfg.gw_mode {
        GwMode::Hla(p) => p,
        other => {
            return Err(HotError::invalid(format!(
                "reduced activations require an HLA weight-gradient mode, got {other:?}"
            )))
        }
    };
    // Reduce along tokens first, then transpose.
    let gy_rt = hla_reduce(gy, Axis::Rows, h).transpose();
    let bits = match precision.bits() {
        None => {
            let x_r = match x_reduced {
                ReducedActivation::Exact(m) => m.clone(),
                ReducedActivation::Quantized(q) => dequantize(q),
            };
            return gy_rt.matmul(&x_r);
        }
        Some(bits) => bits,
    };
    let x_q = match x_reduced {
        ReducedActivation::Quantized(q) if q.bits() == bits => q.clone(),
        ReducedActivation::Quantized(q) => {
            quantize(&dequantize(q), bits, cfg.activation_granularity, cfg.activation_rounding)?
        }
        ReducedActivation::Exact(m) => {
            quantize(m, bits, cfg.activation_granularity, cfg.activation_rounding)?
        }
    };
    match (cfg.gw_granularity, cfg.token_axis) {
        (GradGranularity::PerTensor, _) => {
            let g_q = quantize(&gy_rt, bits, Granularity::PerTensor, cfg.grad_rounding)?;
            let acc = gemm_int(&g_q, &x_q)?;
            apply_scales(&acc, g_q.qparams(), x_q.qparams(), RowScaleMode::OutputRows)
        }
        (GradGranularity::PerToken, TokenAxis::Contracted) => {
            let g_q = quantize(&gy_rt, bits, Granularity::PerCol, cfg.grad_rounding)?;
            let scales = g_q.qparams().scales.clone();
            gemm_int_rowscaled(&g_q, &x_q, &scales)
        }
        (GradGranularity::PerToken, TokenAxis::Output) => {
            let g_q = quantize(&gy_rt, bits, Granularity::PerRow, cfg.grad_rounding)?;
            let acc = gemm_int(&g_q, &x_q)?;
            apply_scales(&acc, g_q.qparams(), x_q.qparams(), RowScaleMode::OutputRows)
        }
    }
}

/// Weight gradient `g_w ≈ g_yᵀ · x` under `cfg.gw_mode`.
pub fn hot_gw(gy: &Matrix, x: &Matrix, cfg: &BackwardConfig) -> Result<Matrix> {
    check_backward_shapes(gy, Some(x), None)?;
    match cfg.gw_mode {
        GwMode::Fp => gy.transpose().matmul(x),
        GwMode::Hla(_) => {
            let reduced = reduce_activation(x, cfg)?;
            gw_from_reduced(gy, &reduced, x.rows(), cfg)
        }
        GwMode::Hq(precision) => {
            let h = &cfg.hadamard;
            let gy_t = block_ht(gy, Axis::Rows, h).transpose();
            let x_t = block_ht(x, Axis::Rows, h);
            quantized_product(&gy_t, &x_t, precision, cfg.grad_rounding)
        }
    }
}

/// Both gradients with at most one path approximated; the other runs in FP.
pub fn analysis_backward(gy: &Matrix, x: &Matrix, w: &Matrix, cfg: &BackwardConfig) -> Result<GradPair> {
    check_backward_shapes(gy, Some(x), Some(w))?;
    if cfg.gx_mode != GxMode::Fp && cfg.gw_mode != GwMode::Fp {
        return Err(HotError::invalid(
            "analysis_backward isolates one path; the other must be FP",
        ));
    }
    Ok(GradPair {
        gx: hot_gx(gy, w, cfg)?,
        gw: hot_gw(gy, x, cfg)?,
    })
}

/// LoRA backward: the frozen base contributes only to `g_x` (through
/// `cfg.gx_mode`); adapter gradients and their `g_x` share run in FP.
pub fn lora_backward(layer: &LinearLayer, gy: &Matrix, x: &Matrix, cfg: &BackwardConfig) -> Result<LoraGrads> {
    let lora = layer
        .lora
        .as_ref()
        .ok_or_else(|| HotError::invalid(format!("layer {} has no LoRA adapter", layer.id)))?;
    check_backward_shapes(gy, Some(x), Some(&layer.weight))?;
    let s = lora.scaling;
    // g_y · A  (L × rank)
    let gy_a = gy.matmul(&lora.a)?;
    // x · Bᵀ  (L × rank)
    let x_bt = x.matmul_transposed(&lora.b)?;
    let ga = gy.transpose().matmul(&x_bt)?.scale(s);
    let gb = gy_a.transpose().matmul(x)?.scale(s);
    let mut gx = hot_gx(gy, &layer.weight, cfg)?;
    gx.add_assign(&gy_a.matmul(&lora.b)?.scale(s))?;
    Ok(LoraGrads { gx, ga, gb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_matrix, Distribution, Rng};

    const NORMAL: Distribution = Distribution::Normal { mean: 0.0, std: 1.0 };

    fn rand(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        random_matrix(rng, r, c, NORMAL).unwrap()
    }

    #[test]
    fn forward_identity_and_zero() {
        let mut rng = Rng::new(1);
        let x = rand(&mut rng, 5, 16);
        let layer = LinearLayer::new("id", Matrix::identity(16));
        assert_eq!(forward(&layer, &x).unwrap(), x);
        let zero = forward(&layer, &Matrix::zeros(5, 16)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let layer = LinearLayer::new("l", Matrix::zeros(4, 8));
        assert!(forward(&layer, &Matrix::zeros(2, 7)).is_err());
        assert!(LinearLayer::new("l", Matrix::zeros(4, 8)).with_bias(vec![0.0; 3]).is_err());
    }

    #[test]
    fn fp_backward_trivia() {
        let mut rng = Rng::new(2);
        let x = rand(&mut rng, 8, 16);
        let w = rand(&mut rng, 16, 16);
        let g = fp_backward(&Matrix::zeros(8, 16), &x, &w).unwrap();
        assert!(g.gx.data().iter().chain(g.gw.data()).all(|&v| v == 0.0));
        let gy = rand(&mut rng, 8, 16);
        let g = fp_backward(&gy, &x, &Matrix::identity(16)).unwrap();
        assert_eq!(g.gx, gy);
        assert!(fp_backward(&gy, &x, &Matrix::zeros(15, 16)).is_err());
    }

    #[test]
    fn weight_gradient_matches_central_differences() {
        // Loss = sum(y); dL/dw[o][i] = Σ_l x[l][i].
        let mut rng = Rng::new(3);
        let x = rand(&mut rng, 6, 4);
        let w = rand(&mut rng, 3, 4);
        let gy = Matrix::from_fn(6, 3, |_, _| 1.0);
        let gw = fp_backward(&gy, &x, &w).unwrap().gw;
        let loss = |w: &Matrix| -> f64 {
            let layer = LinearLayer::new("fd", w.clone());
            forward(&layer, &x).unwrap().data().iter().map(|&v| v as f64).sum()
        };
        let eps = 1e-2f32;
        for o in 0..3 {
            for i in 0..4 {
                let mut plus = w.clone();
                plus.set(o, i, w.get(o, i) + eps);
                let mut minus = w.clone();
                minus.set(o, i, w.get(o, i) - eps);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
                assert!((fd - gw.get(o, i) as f64).abs() < 1e-3, "({o},{i}) fd {fd} vs {}", gw.get(o, i));
            }
        }
    }

    #[test]
    fn disabled_quantization_cancels_transform() {
        let mut rng = Rng::new(4);
        let gy = rand(&mut rng, 32, 48);
        let w = rand(&mut rng, 48, 32);
        let x = rand(&mut rng, 32, 32);
        let cfg = BackwardConfig::default()
            .with_gx(GxMode::Hq(Precision::Disabled))
            .with_gw(GwMode::Hla(Precision::Disabled))
            .with_hadamard(HadamardConfig::default().with_rank(16));
        let fp = fp_backward(&gy, &x, &w).unwrap();
        assert!(hot_gx(&gy, &w, &cfg).unwrap().relative_error(&fp.gx) < 1e-4);
        assert!(hot_gw(&gy, &x, &cfg).unwrap().relative_error(&fp.gw) < 1e-4);
        let hq = cfg.with_gw(GwMode::Hq(Precision::Disabled));
        assert!(hot_gw(&gy, &x, &hq).unwrap().relative_error(&fp.gw) < 1e-4);
    }

    #[test]
    fn padded_output_channels_still_cancel() {
        let mut rng = Rng::new(5);
        let gy = rand(&mut rng, 10, 2);
        let w = rand(&mut rng, 2, 7);
        let cfg = BackwardConfig::default().with_gx(GxMode::Hq(Precision::Disabled));
        let gx = hot_gx(&gy, &w, &cfg).unwrap();
        assert!(gx.relative_error(&gy.matmul(&w).unwrap()) < 1e-5);
        let int4 = hot_gx(&gy, &w, &BackwardConfig::default()).unwrap();
        assert_eq!(int4.shape(), (10, 7));
    }

    #[test]
    fn tile_constant_tokens_survive_hla() {
        let mut rng = Rng::new(6);
        let base_gy = rand(&mut rng, 2, 16);
        let base_x = rand(&mut rng, 2, 16);
        let gy = Matrix::from_fn(32, 16, |l, o| base_gy.get(l / 16, o));
        let x = Matrix::from_fn(32, 16, |l, i| base_x.get(l / 16, i));
        let cfg = BackwardConfig::default()
            .with_gw(GwMode::Hla(Precision::Disabled))
            .with_hadamard(HadamardConfig::default().with_rank(1));
        let fp = gy.transpose().matmul(&x).unwrap();
        assert!(hot_gw(&gy, &x, &cfg).unwrap().relative_error(&fp) < 1e-4);
    }

    #[test]
    fn int8_beats_int4_on_gx() {
        let mut rng = Rng::new(7);
        let mut wins = 0;
        for _ in 0..20 {
            let gy = rand(&mut rng, 32, 64);
            let w = rand(&mut rng, 64, 32);
            let fp = gy.matmul(&w).unwrap();
            let e4 = hot_gx(&gy, &w, &BackwardConfig::default()).unwrap().relative_error(&fp);
            let cfg8 = BackwardConfig::default().with_gx(GxMode::Hq(Precision::Int8));
            let e8 = hot_gx(&gy, &w, &cfg8).unwrap().relative_error(&fp);
            wins += usize::from(e8 < e4);
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn per_token_modes_agree_with_oracle_shapes() {
        let mut rng = Rng::new(8);
        let gy = rand(&mut rng, 64, 32);
        let x = rand(&mut rng, 64, 48);
        for axis in [TokenAxis::Contracted, TokenAxis::Output] {
            let cfg = BackwardConfig {
                gw_granularity: GradGranularity::PerToken,
                token_axis: axis,
                ..BackwardConfig::default()
            };
            let gw = hot_gw(&gy, &x, &cfg).unwrap();
            assert_eq!(gw.shape(), (32, 48));
            let exact = hot_gw(&gy, &x, &cfg.with_gw(GwMode::Hla(Precision::Disabled))).unwrap();
            assert!(gw.relative_error(&exact) < 0.05);
        }
    }

    #[test]
    fn analysis_rejects_two_approximate_paths() {
        let mut rng = Rng::new(9);
        let gy = rand(&mut rng, 16, 16);
        let x = rand(&mut rng, 16, 16);
        let w = rand(&mut rng, 16, 16);
        assert!(analysis_backward(&gy, &x, &w, &BackwardConfig::default()).is_err());
        let fp = analysis_backward(&gy, &x, &w, &BackwardConfig::fp()).unwrap();
        assert_eq!(fp, fp_backward(&gy, &x, &w).unwrap());
    }

    #[test]
    fn path_isolation() {
        let mut rng = Rng::new(10);
        let gy = rand(&mut rng, 32, 32);
        let x = rand(&mut rng, 32, 16);
        let w = rand(&mut rng, 32, 16);
        let base = BackwardConfig::default();
        let gx_a = hot_gx(&gy, &w, &base).unwrap();
        let gx_b = hot_gx(&gy, &w, &base.with_gw(GwMode::Hq(Precision::Int4))).unwrap();
        assert_eq!(gx_a, gx_b);
        let gw_a = hot_gw(&gy, &x, &base).unwrap();
        let gw_b = hot_gw(&gy, &x, &base.with_gx(GxMode::InternalHla)).unwrap();
        assert_eq!(gw_a, gw_b);
    }

    #[test]
    fn lora_with_zero_a() {
        let mut rng = Rng::new(11);
        let w = rand(&mut rng, 16, 32);
        let lora = LoraAdapter {
            a: Matrix::zeros(16, 4),
            b: rand(&mut rng, 4, 32),
            scaling: 1.0,
        };
        let layer = LinearLayer::new("lora", w).with_lora(lora.clone()).unwrap();
        let x = rand(&mut rng, 16, 32);
        let gy = rand(&mut rng, 16, 16);
        let g = lora_backward(&layer, &gy, &x, &BackwardConfig::fp()).unwrap();
        assert!(g.gb.data().iter().all(|&v| v == 0.0));
        let expect = gy.transpose().matmul(&x).unwrap().matmul(&lora.b.transpose()).unwrap();
        assert!(g.ga.relative_error(&expect) < 1e-6);
        let plain = LinearLayer::new("plain", Matrix::zeros(16, 32));
        assert!(lora_backward(&plain, &gy, &x, &BackwardConfig::fp()).is_err());
    }
}
