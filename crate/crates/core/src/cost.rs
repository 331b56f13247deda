//! Analytic FLOP, bit-operation and activation-memory accounting.
//!
//! FLOPs count each butterfly add/sub, each quantize and each dequantize as
//! two operations. Bit operations weight a MAC by the product of both operand
//! widths (FP32 × FP32 = 1024) and transform or quantization work as 32 × 1.

use serde::Serialize;

use crate::abc::{fp32_bytes, predicted_buffer_bytes};
use crate::backward::{BackwardConfig, GwMode, GxMode};
use crate::error::{HotError, Result};
use crate::harness::model::{Model, TraceOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerDims {
    pub l: u64,
    pub o: u64,
    pub i: u64,
    pub tile: u64,
    pub rank: u64,
}

impl LayerDims {
    pub fn new(l: u64, o: u64, i: u64, tile: u64, rank: u64) -> Result<Self> {
        let d = Self { l, o, i, tile, rank };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.o == 0 || self.i == 0 {
            return Err(HotError::invalid("layer dims must be positive"));
        }
        if !self.tile.is_power_of_two() || self.tile < 2 {
            return Err(HotError::invalid(format!("tile {} is not a power of two ≥ 2", self.tile)));
        }
        if self.rank > self.tile {
            return Err(HotError::invalid(format!("rank {} exceeds tile {}", self.rank, self.tile)));
        }
        Ok(())
    }

    fn log_n(&self) -> u64 {
        self.tile.max(1).trailing_zeros() as u64
    }

    /// `L·r/n`, the token count after low-rank reduction (may be fractional).
    pub fn reduced_tokens(&self) -> f64 {
        self.l as f64 * self.rank as f64 / self.tile as f64
    }
}

/// `(L, O, I)` tuples of representative ResNet-50, ViT-B and
/// EfficientFormer-L7 layers.
pub const TABLE6_DIMS: [(&str, &str, [u64; 3]); 16] = [
    ("ResNet-50", "layer1.conv1", [3136, 64, 256]),
    ("ResNet-50", "layer1.conv2", [3136, 64, 576]),
    ("ResNet-50", "layer2.conv1", [784, 128, 512]),
    ("ResNet-50", "layer2.conv2", [784, 128, 1152]),
    ("ResNet-50", "layer3.conv2", [196, 256, 2304]),
    ("ResNet-50", "layer4.conv2", [49, 512, 4608]),
    ("ViT-B", "qkv", [197, 2304, 768]),
    ("ViT-B", "proj", [197, 768, 768]),
    ("ViT-B", "fc1", [197, 3072, 768]),
    ("ViT-B", "fc2", [197, 768, 3072]),
    ("EfficientFormer-L7", "stages.0.fc1", [3136, 384, 96]),
    ("EfficientFormer-L7", "stages.1.fc1", [784, 768, 192]),
    ("EfficientFormer-L7", "stages.2.fc1", [196, 1536, 384]),
    ("EfficientFormer-L7", "stages.3.qkv", [49, 1536, 768]),
    ("EfficientFormer-L7", "stages.3.proj", [49, 768, 1024]),
    ("EfficientFormer-L7", "stages.3.fc1", [49, 3072, 768]),
];

/// `4·L·I·O`.
pub fn vanilla_bp_flops(d: &LayerDims) -> u64 {
    4 * d.l * d.i * d.o
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Overhead {
    pub gx: u64,
    pub gw: u64,
    pub dequant: u64,
}

impl Overhead {
    pub fn total(&self) -> u64 {
        self.gx + self.gw + self.dequant
    }
}

/// Transform and quantization FLOPs of the two backward paths and the
/// dequantization of their outputs. The rank terms use `2·(I+O)·L·r / n`,
/// floored when `L·r` is not a multiple of `n / 2`.
pub fn overhead_flops(d: &LayerDims) -> Overhead {
    let (l, o, i) = (d.l, d.o, d.i);
    let log_n = d.log_n();
    let gx = 2 * l * o * log_n + 2 * i * o * log_n + 2 * l * o + 2 * i * o;
    let rank_terms = (2 * (i + o) * l * d.rank).checked_div(d.tile).unwrap_or(0);
    let gw = 2 * l * i * log_n + 2 * l * o * log_n + rank_terms;
    let dequant = 2 * i * o + 2 * l * i;
    Overhead { gx, gw, dequant }
}

/// Operand widths of the three GEMMs; 32 means full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PathBits {
    pub forward: u32,
    pub gx: u32,
    pub gw: u32,
}

impl PathBits {
    pub const FP: PathBits = PathBits {
        forward: 32,
        gx: 32,
        gw: 32,
    };

    pub fn from_config(cfg: &BackwardConfig) -> Self {
        let gx = match cfg.gx_mode {
            GxMode::Hq(p) | GxMode::PlainQuant(p) => p.width(),
            _ => 32,
        };
        let gw = match cfg.gw_mode {
            GwMode::Hla(p) | GwMode::Hq(p) => p.width(),
            GwMode::Fp => 32,
        };
        Self { forward: 32, gx, gw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bops {
    pub fp: f64,
    pub hot: f64,
    pub reduction: f64,
}

/// FP baseline `3·LIO·1024` against HOT: forward `LIO·b_f²`, `g_x`
/// `LIO·b_gx²`, `g_w` `(L·r/n)·O·I·b_gw²`, plus 32 × overhead FLOPs of every
/// path that is quantized or rank-reduced.
pub fn bops(d: &LayerDims, bits: PathBits) -> Bops {
    let lio = (d.l * d.i * d.o) as f64;
    let fp = 3.0 * lio * 1024.0;
    let ov = overhead_flops(d);
    let gx_active = bits.gx < 32;
    let gw_active = bits.gw < 32 || d.rank < d.tile;
    let sq = |b: u32| (b as f64) * (b as f64);
    let gw_macs = d.reduced_tokens() * (d.o * d.i) as f64;
    let mut overhead = 0u64;
    if gx_active {
        overhead += ov.gx + 2 * d.l * d.i;
    }
    if gw_active {
        overhead += ov.gw + 2 * d.i * d.o;
    }
    let hot = lio * sq(bits.forward) + lio * sq(bits.gx) + gw_macs * sq(bits.gw) + 32.0 * overhead as f64;
    Bops {
        fp,
        hot,
        reduction: 1.0 - hot / fp,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub dims: LayerDims,
    pub vanilla_bp_flops: u64,
    pub gx_overhead_flops: u64,
    pub gw_overhead_flops: u64,
    pub dequant_flops: u64,
    pub fp_bops: f64,
    pub hot_bops: f64,
    pub activation_bytes_fp: u64,
    pub activation_bytes_abc: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CostTotals {
    pub vanilla_bp_flops: u64,
    pub gx_overhead_flops: u64,
    pub gw_overhead_flops: u64,
    pub dequant_flops: u64,
    pub overhead_ratio: f64,
    pub fp_bops: f64,
    pub hot_bops: f64,
    pub bops_reduction: f64,
    pub activation_bytes_fp: u64,
    pub activation_bytes_abc: u64,
    pub memory_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total: CostTotals,
}

pub fn layer_cost(name: &str, d: &LayerDims, cfg: &BackwardConfig) -> LayerCost {
    let ov = overhead_flops(d);
    let b = bops(d, PathBits::from_config(cfg));
    let abc = match cfg.gw_mode {
        GwMode::Hla(_) => predicted_buffer_bytes(d.l as usize, d.i as usize, cfg) as u64,
        _ => fp32_bytes(d.l as usize, d.i as usize) as u64,
    };
    LayerCost {
        name: name.to_string(),
        dims: *d,
        vanilla_bp_flops: vanilla_bp_flops(d),
        gx_overhead_flops: ov.gx,
        gw_overhead_flops: ov.gw,
        dequant_flops: ov.dequant,
        fp_bops: b.fp,
        hot_bops: b.hot,
        activation_bytes_fp: fp32_bytes(d.l as usize, d.i as usize) as u64,
        activation_bytes_abc: abc,
    }
}

impl CostReport {
    pub fn from_layers(layers: Vec<LayerCost>) -> Self {
        let mut t = CostTotals::default();
        for c in &layers {
            t.vanilla_bp_flops += c.vanilla_bp_flops;
            t.gx_overhead_flops += c.gx_overhead_flops;
            t.gw_overhead_flops += c.gw_overhead_flops;
            t.dequant_flops += c.dequant_flops;
            t.fp_bops += c.fp_bops;
            t.hot_bops += c.hot_bops;
            t.activation_bytes_fp += c.activation_bytes_fp;
            t.activation_bytes_abc += c.activation_bytes_abc;
        }
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        t.overhead_ratio = ratio(
            (t.gx_overhead_flops + t.gw_overhead_flops + t.dequant_flops) as f64,
            t.vanilla_bp_flops as f64,
        );
        t.bops_reduction = if t.fp_bops > 0.0 { 1.0 - t.hot_bops / t.fp_bops } else { 0.0 };
        t.memory_ratio = ratio(t.activation_bytes_abc as f64, t.activation_bytes_fp as f64);
        Self { layers, total: t }
    }

    /// Report for named `(L, O, I)` tuples under one backward configuration.
    pub fn for_dims(dims: &[(String, [u64; 3])], cfg: &BackwardConfig) -> Result<Self> {
        let h = &cfg.hadamard;
        let layers = dims
            .iter()
            .map(|(name, [l, o, i])| {
                let d = LayerDims::new(*l, *o, *i, h.tile as u64, h.rank as u64)?;
                Ok(layer_cost(name, &d, cfg))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(layers))
    }
}

/// Per linear layer of `model`, with `batch · seq_len` tokens, each layer
/// under its configuration in `opts`.
pub fn memory_report(model: &Model, batch: usize, seq_len: usize, opts: &TraceOptions) -> Result<CostReport> {
    let tokens = (batch * seq_len) as u64;
    let mut layers = Vec::new();
    for l in model.linear_layers() {
        let cfg = opts.config_for(&l.id);
        // Frozen LoRA bases keep their dense activation for the adapters.
        let cfg = if l.lora.is_some() { cfg.with_gw(GwMode::Fp) } else { cfg };
        let h = &cfg.hadamard;
        let d = LayerDims {
            l: tokens,
            o: l.out_features() as u64,
            i: l.in_features() as u64,
            tile: h.tile as u64,
            rank: h.rank as u64,
        };
        layers.push(layer_cost(&l.id, &d, &cfg));
    }
    Ok(CostReport::from_layers(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::Precision;

    fn d(l: u64, o: u64, i: u64) -> LayerDims {
        LayerDims::new(l, o, i, 16, 8).unwrap()
    }

    #[test]
    fn reference_layer() {
        let dims = d(49, 448, 1792);
        assert_eq!(vanilla_bp_flops(&dims), 157_351_936);
        let ov = overhead_flops(&dims);
        assert_eq!(ov, Overhead { gx: 8_247_680, gw: 987_840, dequant: 1_781_248 });
        let ratio = ov.total() as f64 / vanilla_bp_flops(&dims) as f64;
        assert!((ratio - 0.07).abs() < 0.005, "{ratio}");
    }

    #[test]
    fn trivial_cases() {
        let zero = LayerDims { l: 0, o: 3, i: 4, tile: 16, rank: 8 };
        assert_eq!(vanilla_bp_flops(&zero), 0);
        assert_eq!(vanilla_bp_flops(&d(98, 448, 1792)), 2 * vanilla_bp_flops(&d(49, 448, 1792)));
        let r0 = LayerDims { rank: 0, ..d(32, 16, 16) };
        assert_eq!(overhead_flops(&r0).gw, 2 * 32 * 16 * 4 * 2);
        let n2 = LayerDims::new(4, 2, 2, 2, 1).unwrap();
        assert_eq!(overhead_flops(&n2).gx, 2 * 4 * 2 + 2 * 2 * 2 + 2 * 4 * 2 + 2 * 2 * 2);
        assert!(LayerDims::new(1, 1, 1, 12, 2).is_err());
        assert!(LayerDims::new(1, 1, 1, 16, 17).is_err());
    }

    #[test]
    fn bops_conventions() {
        let full = LayerDims { rank: 16, ..d(192, 3072, 768) };
        assert_eq!(bops(&full, PathBits::FP).reduction, 0.0);
        let fc1 = d(192, 3072, 768);
        let r = bops(&fc1, PathBits { forward: 32, gx: 4, gw: 8 }).reduction;
        assert!((0.60..=0.70).contains(&r), "{r}");
        let r8 = bops(&fc1, PathBits { forward: 32, gx: 8, gw: 8 }).reduction;
        assert!(r8 < r);
        let mut prev = 0.0;
        for rank in 1..=16 {
            let h = bops(&LayerDims { rank, ..fc1 }, PathBits { forward: 32, gx: 4, gw: 8 }).hot;
            assert!(h > prev);
            prev = h;
        }
    }

    #[test]
    fn report_totals_are_sums() {
        let cfg = BackwardConfig::default();
        let dims: Vec<(String, [u64; 3])> =
            TABLE6_DIMS.iter().map(|(m, n, d)| (format!("{m}/{n}"), *d)).collect();
        let rep = CostReport::for_dims(&dims, &cfg).unwrap();
        let sum: u64 = rep.layers.iter().map(|c| c.gw_overhead_flops).sum();
        assert_eq!(rep.total.gw_overhead_flops, sum);
        let hot: f64 = rep.layers.iter().map(|c| c.hot_bops).sum();
        assert_eq!(rep.total.hot_bops, hot);
    }

    #[test]
    fn memory_ratio_of_one_layer() {
        let cfg = BackwardConfig::default();
        let c = layer_cost("l", &d(256, 256, 256), &cfg);
        let ratio = c.activation_bytes_abc as f64 / c.activation_bytes_fp as f64;
        assert!(ratio > 0.125 && ratio <= 0.127, "{ratio}");
        let full = cfg.with_hadamard(cfg.hadamard.with_rank(16)).with_gw(GwMode::Hla(Precision::Int8));
        let c = layer_cost("l", &LayerDims { rank: 16, ..d(256, 256, 256) }, &full);
        let ratio = c.activation_bytes_abc as f64 / c.activation_bytes_fp as f64;
        assert!((ratio - 0.25).abs() < 1e-3);
    }
}
