mod common;

use common::{flatten, matmul64, normal, rel_err, to_f64};
use hot_core::igemm::{apply_scales, gemm_int, gemm_int_rowscaled, RowScaleMode};
use hot_core::quantizer::{dequantize, quantize, Bits, Granularity, QParams, QuantTensor, Rounding};
use hot_core::Rng;
use proptest::prelude::*;

fn as_int8(q: &QuantTensor) -> QuantTensor {
    let params = QParams {
        bits: Bits::Int8,
        ..q.qparams().clone()
    };
    QuantTensor::from_codes(q.rows(), q.cols(), &q.codes(), params).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn packed_int4_equals_unpacked_codes(seed in any::<u64>(), m in 1usize..20, k in 1usize..40, n in 1usize..20) {
        let mut rng = Rng::new(seed);
        let a = quantize(&normal(&mut rng, m, k), Bits::Int4, Granularity::PerTensor, Rounding::PseudoStochastic).unwrap();
        let b = quantize(&normal(&mut rng, k, n), Bits::Int4, Granularity::PerTensor, Rounding::PseudoStochastic).unwrap();
        let packed = gemm_int(&a, &b).unwrap();
        let unpacked = gemm_int(&as_int8(&a), &as_int8(&b)).unwrap();
        prop_assert_eq!(packed.data(), unpacked.data());
    }

    #[test]
    fn output_scales_commute_with_dequantization(seed in any::<u64>(), m in 1usize..20, k in 1usize..40, n in 1usize..20, int4 in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let bits = if int4 { Bits::Int4 } else { Bits::Int8 };
        let a = quantize(&normal(&mut rng, m, k), bits, Granularity::PerRow, Rounding::Nearest).unwrap();
        let b = quantize(&normal(&mut rng, k, n), bits, Granularity::PerCol, Rounding::Nearest).unwrap();
        let out = apply_scales(&gemm_int(&a, &b).unwrap(), a.qparams(), b.qparams(), RowScaleMode::OutputRows).unwrap();
        let exact = flatten(&matmul64(&to_f64(&dequantize(&a)), &to_f64(&dequantize(&b))));
        prop_assert!(rel_err(&out, &exact) < 1e-4);
    }

    #[test]
    fn contracted_scales_match_dequantized_product(seed in any::<u64>(), m in 1usize..20, k in 1usize..40, n in 1usize..20) {
        let mut rng = Rng::new(seed);
        let a = quantize(&normal(&mut rng, m, k), Bits::Int8, Granularity::PerCol, Rounding::PseudoStochastic).unwrap();
        let b = quantize(&normal(&mut rng, k, n), Bits::Int8, Granularity::PerTensor, Rounding::PseudoStochastic).unwrap();
        let out = gemm_int_rowscaled(&a, &b, &a.qparams().scales).unwrap();
        let exact = flatten(&matmul64(&to_f64(&dequantize(&a)), &to_f64(&dequantize(&b))));
        prop_assert!(rel_err(&out, &exact) < 1e-4);
    }
}

#[test]
fn contracted_scales_cannot_be_applied_after_the_sum() {
    let mut rng = Rng::new(1);
    let a = quantize(&normal(&mut rng, 4, 6), Bits::Int8, Granularity::PerCol, Rounding::Nearest).unwrap();
    let b = quantize(&normal(&mut rng, 6, 3), Bits::Int8, Granularity::PerTensor, Rounding::Nearest).unwrap();
    let acc = gemm_int(&a, &b).unwrap();
    assert!(apply_scales(&acc, a.qparams(), b.qparams(), RowScaleMode::Contracted).is_err());
}
