mod common;

use common::normal;
use hot_core::backward::{hot_gw, hot_gx, BackwardConfig};
use hot_core::cost::{bops, overhead_flops, vanilla_bp_flops, LayerDims, PathBits};
use hot_core::counters;
use hot_core::Rng;
use proptest::prelude::*;

/// Add/subs of a tiled FWHT over `vectors` vectors of length `len`.
fn tiled_fwht_ops(vectors: u64, len: u64, n: u64) -> u64 {
    let per_tile = n * n.trailing_zeros() as u64;
    vectors * (len / n) * per_tile
}

/// Counts FLOPs operation by operation, two per add/sub and two per element
/// quantized or dequantized.
fn rederived(l: u64, o: u64, i: u64, n: u64, r: u64) -> (u64, u64, u64) {
    let reduced = l / n * r;
    let gx = 2 * (tiled_fwht_ops(l, o, n) + tiled_fwht_ops(i, o, n)) + 2 * (l * o + o * i);
    let gw = 2 * (tiled_fwht_ops(o, l, n) + tiled_fwht_ops(i, l, n)) + 2 * reduced * (o + i);
    let dequant = 2 * (l * i + o * i);
    (gx, gw, dequant)
}

#[test]
fn formulas_match_operation_counts() {
    let mut rng = Rng::new(21);
    for _ in 0..20 {
        let n = 1u64 << (1 + rng.below(5));
        let r = 1 + rng.below(n as usize) as u64;
        let dim = |rng: &mut Rng| n * (1 + rng.below(64) as u64);
        let (l, o, i) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let ov = overhead_flops(&LayerDims::new(l, o, i, n, r).unwrap());
        assert_eq!((ov.gx, ov.gw, ov.dequant), rederived(l, o, i, n, r), "L={l} O={o} I={i} n={n} r={r}");
    }
}

#[test]
fn instrumented_layer_matches_formulas() {
    let mut rng = Rng::new(22);
    for (l, o, i) in [(64, 48, 32), (128, 64, 96), (32, 256, 16)] {
        let (gy, x, w) = (normal(&mut rng, l, o), normal(&mut rng, l, i), normal(&mut rng, o, i));
        let cfg = BackwardConfig::default();
        counters::reset();
        hot_gx(&gy, &w, &cfg).unwrap();
        hot_gw(&gy, &x, &cfg).unwrap();
        let c = counters::snapshot();
        let measured = 2 * (c.fwht_add_sub + c.quantized + c.dequantized);
        let d = LayerDims::new(l as u64, o as u64, i as u64, 16, 8).unwrap();
        let analytic = overhead_flops(&d).total();
        let gap = (measured as f64 - analytic as f64).abs() / analytic as f64;
        assert!(gap <= 0.05, "{l}x{o}x{i}: measured {measured}, analytic {analytic}");
    }
}

proptest! {
    #[test]
    fn hot_bops_increase_with_rank(l in 1u64..512, o in 1u64..512, i in 1u64..512, d in 1u32..6) {
        let n = 1u64 << d;
        let bits = PathBits { forward: 32, gx: 4, gw: 8 };
        let costs: Vec<f64> = (1..=n).map(|r| bops(&LayerDims::new(l, o, i, n, r).unwrap(), bits).hot).collect();
        prop_assert!(costs.windows(2).all(|w| w[0] < w[1]), "{costs:?}");
    }

    #[test]
    fn costs_are_non_negative_and_scale_with_tokens(l in 1u64..512, o in 1u64..512, i in 1u64..512) {
        let d = LayerDims::new(l, o, i, 16, 8).unwrap();
        let d2 = LayerDims::new(2 * l, o, i, 16, 8).unwrap();
        prop_assert_eq!(vanilla_bp_flops(&d2), 2 * vanilla_bp_flops(&d));
        let b = bops(&d, PathBits::FP);
        prop_assert!(b.fp > 0.0 && b.hot > 0.0);
    }
}
