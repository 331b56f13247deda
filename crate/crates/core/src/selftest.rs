//! Fast invariant checks run by `hot selftest`.

use crate::abc::{compress_activation, gw_from_compressed};
use crate::backward::{hot_gw, hot_gx, BackwardConfig, GwMode, GxMode, Precision};
use crate::cost::{overhead_flops, vanilla_bp_flops, LayerDims};
use crate::error::Result;
use crate::hadamard::{block_ht, build_hadamard, fwht, Axis, HadamardConfig};
use crate::igemm::gemm_int;
use crate::linalg::{random_matrix, Distribution, Matrix, Rng};
use crate::quantizer::{dequantize, pack_nibbles, quantize, unpack_nibbles, Bits, Granularity, Rounding};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// `None` on success, otherwise the reason.
    pub failure: Option<String>,
}

type Check = fn(&mut Rng) -> Result<std::result::Result<(), String>>;

fn normal(rng: &mut Rng, r: usize, c: usize) -> Result<Matrix> {
    random_matrix(rng, r, c, Distribution::Normal { mean: 0.0, std: 1.0 })
}

fn orthogonality(_: &mut Rng) -> Result<std::result::Result<(), String>> {
    for d in 0..=10 {
        let h = build_hadamard(d)?;
        let err = h.matmul_transposed(&h)?.max_abs_diff(&Matrix::identity(h.rows()));
        if err >= 1e-5 {
            return Ok(Err(format!("order {d}: |HHᵀ − I| = {err}")));
        }
    }
    Ok(Ok(()))
}

fn fwht_matches_dense(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    for d in 1..=8 {
        let h = build_hadamard(d)?;
        let n = h.rows();
        for _ in 0..10 {
            let v = normal(rng, n, 1)?;
            let dense = h.matmul(&v)?;
            let fast = fwht(v.data())?;
            let err = dense.data().iter().zip(&fast).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
            if err >= 1e-5 {
                return Ok(Err(format!("order {d}: error {err}")));
            }
        }
    }
    Ok(Ok(()))
}

fn involution(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let cfg = HadamardConfig::default();
    let m = normal(rng, 32, 48)?;
    for axis in [Axis::Rows, Axis::Cols] {
        let err = block_ht(&block_ht(&m, axis, &cfg), axis, &cfg).max_abs_diff(&m);
        if err >= 1e-5 {
            return Ok(Err(format!("{axis:?}: error {err}")));
        }
    }
    Ok(Ok(()))
}

fn unbiasedness(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let m = random_matrix(rng, 256, 512, Distribution::Uniform { lo: -1.0, hi: 1.0 })?;
    let q = quantize(&m, Bits::Int4, Granularity::PerTensor, Rounding::PseudoStochastic)?;
    let scale = q.qparams().scales[0] as f64;
    let d = dequantize(&q);
    let mut sum = 0f64;
    for (a, b) in d.data().iter().zip(m.data()) {
        let e = *a as f64 - *b as f64;
        if e.abs() > scale {
            return Ok(Err(format!("element error {e} exceeds scale {scale}")));
        }
        sum += e;
    }
    let mean = sum / m.len() as f64;
    if mean.abs() >= 0.005 * scale {
        return Ok(Err(format!("mean error {mean} with scale {scale}")));
    }
    Ok(Ok(()))
}

fn igemm_oracle(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    for bits in [Bits::Int4, Bits::Int8] {
        let a = quantize(&normal(rng, 7, 33)?, bits, Granularity::PerTensor, Rounding::Nearest)?;
        let b = quantize(&normal(rng, 33, 5)?, bits, Granularity::PerTensor, Rounding::Nearest)?;
        let acc = gemm_int(&a, &b)?;
        let (ca, cb) = (a.codes(), b.codes());
        for i in 0..7 {
            for k in 0..5 {
                let oracle: f64 = (0..33).map(|j| ca[i * 33 + j] as f64 * cb[j * 5 + k] as f64).sum();
                if acc.get(i, k) as f64 != oracle {
                    return Ok(Err(format!("{bits:?} mismatch at ({i},{k})")));
                }
            }
        }
    }
    Ok(Ok(()))
}

fn pack_round_trip(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    if pack_nibbles(&[3, -2])? != vec![0xE3] {
        return Ok(Err("[3, -2] does not pack to 0xE3".into()));
    }
    let codes: Vec<i8> = (0..101).map(|_| rng.below(16) as i8 - 8).collect();
    if unpack_nibbles(&pack_nibbles(&codes)?, codes.len())? != codes {
        return Ok(Err("round trip changed codes".into()));
    }
    Ok(Ok(()))
}

fn cancellation(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let cfg = BackwardConfig::default()
        .with_gx(GxMode::Hq(Precision::Disabled))
        .with_gw(GwMode::Hla(Precision::Disabled))
        .with_hadamard(HadamardConfig::default().with_rank(16));
    let gy = normal(rng, 40, 48)?;
    let x = normal(rng, 40, 24)?;
    let w = normal(rng, 48, 24)?;
    let gx = hot_gx(&gy, &w, &cfg)?.relative_error(&gy.matmul(&w)?);
    let gw = hot_gw(&gy, &x, &cfg)?.relative_error(&gy.transpose().matmul(&x)?);
    if gx >= 1e-4 || gw >= 1e-4 {
        return Ok(Err(format!("relative errors gx {gx}, gw {gw}")));
    }
    Ok(Ok(()))
}

fn abc_bit_exact(rng: &mut Rng) -> Result<std::result::Result<(), String>> {
    let cfg = BackwardConfig::default();
    let x = normal(rng, 64, 32)?;
    let gy = normal(rng, 64, 16)?;
    let c = compress_activation("l", &x, &cfg)?;
    if gw_from_compressed(&gy, &c, &cfg)? != hot_gw(&gy, &x, &cfg)? {
        return Ok(Err("buffer-fed g_w differs from recomputed g_w".into()));
    }
    Ok(Ok(()))
}

fn cost_reference(_: &mut Rng) -> Result<std::result::Result<(), String>> {
    let d = LayerDims::new(49, 448, 1792, 16, 8)?;
    let ratio = overhead_flops(&d).total() as f64 / vanilla_bp_flops(&d) as f64;
    if vanilla_bp_flops(&d) != 157_351_936 || (ratio - 0.07).abs() > 0.005 {
        return Ok(Err(format!("overhead ratio {ratio}")));
    }
    Ok(Ok(()))
}

const CHECKS: [(&str, Check); 9] = [
    ("hadamard_orthogonality", orthogonality),
    ("fwht_matches_dense", fwht_matches_dense),
    ("block_ht_involution", involution),
    ("quantizer_unbiased", unbiasedness),
    ("igemm_code_oracle", igemm_oracle),
    ("nibble_pack_round_trip", pack_round_trip),
    ("orthogonality_cancellation", cancellation),
    ("abc_bit_exact", abc_bit_exact),
    ("cost_reference_layer", cost_reference),
];

/// Runs every check with a fixed seed.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = Rng::new(seed);
    CHECKS
        .iter()
        .map(|(name, check)| {
            let failure = match check(&mut rng) {
                Ok(Ok(())) => None,
                Ok(Err(reason)) => Some(reason),
                Err(e) => Some(e.to_string()),
            };
            CheckOutcome { name, failure }
        })
        .collect()
}
