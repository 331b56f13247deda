//! Activation buffer compression: the forward pass stores `x` already reduced
//! along tokens and quantized to INT8, and the weight-gradient path consumes
//! that buffer directly.

use std::io::{Read, Write};

use crate::backward::{gw_from_reduced, reduce_activation, BackwardConfig, ReducedActivation};
use crate::error::{HotError, Result};
use crate::hadamard::{BasisOrdering, HadamardConfig};
use crate::linalg::{read_u32, Matrix};
use crate::quantizer::{Granularity, QuantTensor};

const SPILL_MAGIC: &[u8; 4] = b"HOTA";

/// Bytes of descriptor stored alongside payload and scales in memory. The
/// descriptor (layer id, lengths, config) lives in the owning struct rather
/// than the buffer, so nothing is counted for it.
pub const BUFFER_HEADER_BYTES: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedActivation {
    pub layer_id: String,
    pub original_len: usize,
    pub payload: ReducedActivation,
    pub hadamard: HadamardConfig,
}

pub fn compress_activation(layer_id: &str, x: &Matrix, cfg: &BackwardConfig) -> Result<CompressedActivation> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(HotError::Shape {
            op: "compress_activation",
            left: x.shape(),
            right: (cfg.hadamard.tile, cfg.hadamard.rank),
        });
    }
    Ok(CompressedActivation {
        layer_id: layer_id.to_string(),
        original_len: x.rows(),
        payload: reduce_activation(x, cfg)?,
        hadamard: cfg.hadamard,
    })
}

impl CompressedActivation {
    pub fn cols(&self) -> usize {
        self.payload.cols()
    }

    pub fn check_layer(&self, layer_id: &str) -> Result<()> {
        if self.layer_id != layer_id {
            return Err(HotError::invalid(format!(
                "activation buffer belongs to layer {}, not {layer_id}",
                self.layer_id
            )));
        }
        Ok(())
    }
}

pub fn gw_from_compressed(gy: &Matrix, cact: &CompressedActivation, cfg: &BackwardConfig) -> Result<Matrix> {
    if cfg.hadamard != cact.hadamard {
        return Err(HotError::invalid(format!(
            "buffer for {} was compressed with {:?}, backward uses {:?}",
            cact.layer_id, cact.hadamard, cfg.hadamard
        )));
    }
    let stored_bits = match &cact.payload {
        ReducedActivation::Quantized(q) => Some(q.bits()),
        ReducedActivation::Exact(_) => None,
    };
    if stored_bits != cfg.activation_precision().bits() {
        return Err(HotError::invalid(format!(
            "buffer for {} holds {stored_bits:?}, backward expects {:?}",
            cact.layer_id,
            cfg.activation_precision()
        )));
    }
    gw_from_reduced(gy, &cact.payload, cact.original_len, cfg)
}

pub fn buffer_bytes(cact: &CompressedActivation) -> usize {
    let body = match &cact.payload {
        ReducedActivation::Quantized(q) => q.payload_bytes() + q.scale_bytes(),
        ReducedActivation::Exact(m) => m.len() * 4,
    };
    body + BUFFER_HEADER_BYTES
}

pub fn fp32_bytes(rows: usize, cols: usize) -> usize {
    rows * cols * 4
}

/// Compressed bytes over the FP32 bytes of the original activation.
pub fn compression_ratio(cact: &CompressedActivation) -> f64 {
    buffer_bytes(cact) as f64 / fp32_bytes(cact.original_len, cact.cols()) as f64
}

/// Buffer size for an `rows × cols` activation without materializing it.
pub fn predicted_buffer_bytes(rows: usize, cols: usize, cfg: &BackwardConfig) -> usize {
    let reduced = cfg.hadamard.reduced_len(rows);
    let body = match cfg.activation_precision().bits() {
        None => reduced * cols * 4,
        Some(bits) => {
            let payload = match bits {
                crate::quantizer::Bits::Int8 => reduced * cols,
                crate::quantizer::Bits::Int4 => reduced * cols.div_ceil(2),
            };
            let scales = match cfg.activation_granularity {
                Granularity::PerTensor => 1,
                Granularity::PerRow => reduced,
                Granularity::PerCol => cols,
            };
            payload + 4 * scales
        }
    };
    body + BUFFER_HEADER_BYTES
}

/// Writes the spill record: `HOTA`, u16 id length, id bytes, u32 tile, u32
/// rank, u8 ordering, u32 original length, u8 payload kind (0 = HOTQ quant
/// tensor, 1 = HOTM matrix), then the embedded record.
pub fn write_spill(cact: &CompressedActivation, w: &mut impl Write) -> Result<()> {
    let id = cact.layer_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(HotError::invalid("layer id too long for the spill format"));
    }
    w.write_all(SPILL_MAGIC)?;
    w.write_all(&(id.len() as u16).to_le_bytes())?;
    w.write_all(id)?;
    w.write_all(&(cact.hadamard.tile as u32).to_le_bytes())?;
    w.write_all(&(cact.hadamard.rank as u32).to_le_bytes())?;
    let ordering = match cact.hadamard.ordering {
        BasisOrdering::LpL1 => 0u8,
        BasisOrdering::Sequency => 1u8,
    };
    w.write_all(&[ordering])?;
    w.write_all(&(cact.original_len as u32).to_le_bytes())?;
    match &cact.payload {
        ReducedActivation::Quantized(q) => {
            w.write_all(&[0])?;
            q.write_to(w)
        }
        ReducedActivation::Exact(m) => {
            w.write_all(&[1])?;
            m.write_to(w)
        }
    }
}

pub fn read_spill(r: &mut impl Read) -> Result<CompressedActivation> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SPILL_MAGIC {
        return Err(HotError::Format(format!("bad activation spill magic {magic:?}")));
    }
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut id)?;
    let layer_id = String::from_utf8(id).map_err(|e| HotError::Format(e.to_string()))?;
    let tile = read_u32(r)? as usize;
    let rank = read_u32(r)? as usize;
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let ordering = match byte[0] {
        0 => BasisOrdering::LpL1,
        1 => BasisOrdering::Sequency,
        other => return Err(HotError::Format(format!("unknown ordering tag {other}"))),
    };
    let hadamard =
        HadamardConfig::new(tile, rank, ordering).map_err(|e| HotError::Format(e.to_string()))?;
    let original_len = read_u32(r)? as usize;
    r.read_exact(&mut byte)?;
    let payload = match byte[0] {
        0 => ReducedActivation::Quantized(QuantTensor::read_from(r)?),
        1 => ReducedActivation::Exact(Matrix::read_from(r)?),
        other => return Err(HotError::Format(format!("unknown payload kind {other}"))),
    };
    if payload.rows() != hadamard.reduced_len(original_len) {
        return Err(HotError::Format(format!(
            "payload has {} rows, expected {}",
            payload.rows(),
            hadamard.reduced_len(original_len)
        )));
    }
    Ok(CompressedActivation {
        layer_id,
        original_len,
        payload,
        hadamard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::{hot_gw, GwMode, Precision};
    use crate::linalg::{random_matrix, Distribution, Rng};

    const NORMAL: Distribution = Distribution::Normal { mean: 0.0, std: 1.0 };

    #[test]
    fn lossless_when_full_rank_and_unquantized() {
        let mut rng = Rng::new(1);
        let x = random_matrix(&mut rng, 48, 32, NORMAL).unwrap();
        let gy = random_matrix(&mut rng, 48, 16, NORMAL).unwrap();
        let cfg = BackwardConfig::default()
            .with_gw(GwMode::Hla(Precision::Disabled))
            .with_hadamard(HadamardConfig::default().with_rank(16));
        let cact = compress_activation("l0", &x, &cfg).unwrap();
        let gw = gw_from_compressed(&gy, &cact, &cfg).unwrap();
        assert!(gw.relative_error(&gy.transpose().matmul(&x).unwrap()) < 1e-4);
    }

    #[test]
    fn byte_arithmetic_256() {
        let x = random_matrix(&mut Rng::new(2), 256, 256, NORMAL).unwrap();
        let cfg = BackwardConfig::default();
        let cact = compress_activation("l0", &x, &cfg).unwrap();
        match &cact.payload {
            ReducedActivation::Quantized(q) => assert_eq!(q.payload_bytes(), 128 * 256),
            _ => panic!("expected INT8 payload"),
        }
        assert_eq!(buffer_bytes(&cact), 32_768 + 4);
        let ratio = compression_ratio(&cact);
        assert!(ratio > 0.125 && ratio <= 0.127, "{ratio}");
        assert_eq!(predicted_buffer_bytes(256, 256, &cfg), buffer_bytes(&cact));
    }

    #[test]
    fn full_rank_ratio_is_quarter() {
        let x = random_matrix(&mut Rng::new(3), 256, 256, NORMAL).unwrap();
        let cfg = BackwardConfig::default().with_hadamard(HadamardConfig::default().with_rank(16));
        let ratio = compression_ratio(&compress_activation("l0", &x, &cfg).unwrap());
        assert!((ratio - 0.25).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn doubling_columns_doubles_payload() {
        let cfg = BackwardConfig::default();
        let a = compress_activation("a", &Matrix::zeros(64, 32), &cfg).unwrap();
        let b = compress_activation("b", &Matrix::zeros(64, 64), &cfg).unwrap();
        assert_eq!(buffer_bytes(&b) - 4, 2 * (buffer_bytes(&a) - 4));
    }

    #[test]
    fn zero_activation_compresses_to_zero_codes() {
        let cfg = BackwardConfig::default();
        let cact = compress_activation("z", &Matrix::zeros(32, 16), &cfg).unwrap();
        match &cact.payload {
            ReducedActivation::Quantized(q) => assert!(q.codes().iter().all(|&c| c == 0)),
            _ => panic!("expected INT8 payload"),
        }
        let gy = random_matrix(&mut Rng::new(4), 32, 16, NORMAL).unwrap();
        let gw = gw_from_compressed(&gy, &cact, &cfg).unwrap();
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn buffer_matches_recomputed_path_bit_exactly() {
        let mut rng = Rng::new(5);
        let x = random_matrix(&mut rng, 197, 48, NORMAL).unwrap();
        let gy = random_matrix(&mut rng, 197, 32, NORMAL).unwrap();
        let cfg = BackwardConfig::default();
        let cact = compress_activation("l", &x, &cfg).unwrap();
        assert_eq!(gw_from_compressed(&gy, &cact, &cfg).unwrap(), hot_gw(&gy, &x, &cfg).unwrap());
        let gw_zero = gw_from_compressed(&Matrix::zeros(197, 32), &cact, &cfg).unwrap();
        assert!(gw_zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_config_rejected() {
        let x = random_matrix(&mut Rng::new(6), 32, 16, NORMAL).unwrap();
        let cfg = BackwardConfig::default();
        let cact = compress_activation("l", &x, &cfg).unwrap();
        let gy = Matrix::zeros(32, 8);
        let other = cfg.with_hadamard(HadamardConfig::default().with_rank(4));
        assert!(gw_from_compressed(&gy, &cact, &other).is_err());
        let fp = cfg.with_gw(GwMode::Hla(Precision::Disabled));
        assert!(gw_from_compressed(&gy, &cact, &fp).is_err());
        assert!(gw_from_compressed(&Matrix::zeros(31, 8), &cact, &cfg).is_err());
        assert!(cact.check_layer("other").is_err());
    }

    #[test]
    fn spill_round_trip() {
        let x = random_matrix(&mut Rng::new(7), 40, 24, NORMAL).unwrap();
        for cfg in [
            BackwardConfig::default(),
            BackwardConfig::default().with_gw(GwMode::Hla(Precision::Disabled)),
        ] {
            let cact = compress_activation("block0.fc1", &x, &cfg).unwrap();
            let mut bytes = Vec::new();
            write_spill(&cact, &mut bytes).unwrap();
            assert_eq!(&bytes[..4], b"HOTA");
            let back = read_spill(&mut bytes.as_slice()).unwrap();
            assert_eq!(back, cact);
        }
    }
}
