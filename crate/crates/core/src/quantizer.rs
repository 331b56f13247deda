//! Symmetric max-abs quantization to INT4/INT8.
//!
//! Codes are signed and zero-point free, so a product of two quantized
//! operands dequantizes by multiplying the integer result with the scales.
//! INT4 codes live in `[-7, 7]` and are stored two per byte, the even column
//! in the low nibble.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{HotError, Result};
use crate::linalg::{read_u32, Matrix};

const QUANT_MAGIC: &[u8; 4] = b"HOTQ";

/// Number of low mantissa bits used as the pseudo-random threshold.
pub const PSEUDO_RANDOM_BITS: u32 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bits {
    #[serde(rename = "int4")]
    Int4,
    #[serde(rename = "int8")]
    Int8,
}

impl Bits {
    pub fn width(self) -> u8 {
        match self {
            Bits::Int4 => 4,
            Bits::Int8 => 8,
        }
    }

    pub fn qmax(self) -> i32 {
        match self {
            Bits::Int4 => 7,
            Bits::Int8 => 127,
        }
    }

    pub fn from_width(width: u8) -> Result<Bits> {
        match width {
            4 => Ok(Bits::Int4),
            8 => Ok(Bits::Int8),
            other => Err(HotError::invalid(format!("unsupported bit width {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per row (per token when rows are tokens).
    PerRow,
    /// One scale per column.
    PerCol,
}

impl Granularity {
    fn tag(self) -> u8 {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerRow => 1,
            Granularity::PerCol => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Granularity::PerTensor),
            1 => Ok(Granularity::PerRow),
            2 => Ok(Granularity::PerCol),
            other => Err(HotError::Format(format!("unknown granularity tag {other}"))),
        }
    }

    fn scale_count(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerRow => rows,
            Granularity::PerCol => cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    PseudoStochastic,
    /// Round half away from zero.
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QParams {
    pub bits: Bits,
    pub granularity: Granularity,
    pub scales: Vec<f32>,
}

impl QParams {
    pub fn qmax(&self) -> i32 {
        self.bits.qmax()
    }

    #[inline]
    pub fn scale_at(&self, row: usize, col: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerRow => self.scales[row],
            Granularity::PerCol => self.scales[col],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Codes {
    Int8(Vec<i8>),
    /// Row-major nibbles; each row occupies `ceil(cols / 2)` bytes.
    Packed4(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    codes: Codes,
    qparams: QParams,
    /// Elements clamped to `±qmax` while quantizing.
    clamped: usize,
}

fn range_scale(max_abs: f32, qmax: i32) -> f32 {
    if max_abs == 0.0 {
        return f32::MIN_POSITIVE;
    }
    let mut scale = max_abs / qmax as f32;
    if scale < f32::MIN_POSITIVE {
        scale = f32::MIN_POSITIVE;
    }
    // The largest magnitude must land on the grid without clamping.
    while max_abs as f64 / scale as f64 > qmax as f64 {
        scale = f32::from_bits(scale.to_bits() + 1);
    }
    scale
}

pub fn compute_qparams(m: &Matrix, bits: Bits, granularity: Granularity) -> Result<QParams> {
    if m.is_empty() {
        return Err(HotError::invalid("cannot quantize an empty matrix"));
    }
    let qmax = bits.qmax();
    let scales = match granularity {
        Granularity::PerTensor => vec![range_scale(m.max_abs(), qmax)],
        Granularity::PerRow => (0..m.rows())
            .map(|i| {
                let max = m.row(i).iter().fold(0.0f32, |a, v| a.max(v.abs()));
                range_scale(max, qmax)
            })
            .collect(),
        Granularity::PerCol => {
            let mut maxes = vec![0.0f32; m.cols()];
            for i in 0..m.rows() {
                for (mx, v) in maxes.iter_mut().zip(m.row(i)) {
                    *mx = mx.max(v.abs());
                }
            }
            maxes.into_iter().map(|mx| range_scale(mx, qmax)).collect()
        }
    };
    Ok(QParams {
        bits,
        granularity,
        scales,
    })
}

/// Rounds `v / scale` up with probability equal to its fractional part,
/// using the low 11 bits of `v`'s IEEE-754 pattern as the uniform threshold.
/// Ties (`frac == threshold`) round down. The result is clamped to `±qmax`.
pub fn pseudo_stochastic_round(v: f32, scale: f32, qmax: i32) -> i32 {
    let t = v as f64 / scale as f64;
    let floor = t.floor();
    let frac = t - floor;
    let threshold = (v.to_bits() & ((1 << PSEUDO_RANDOM_BITS) - 1)) as f64
        / (1u32 << PSEUDO_RANDOM_BITS) as f64;
    let code = floor as i64 + i64::from(frac > threshold);
    code.clamp(-(qmax as i64), qmax as i64) as i32
}

pub fn nearest_round(v: f32, scale: f32, qmax: i32) -> i32 {
    let t = (v as f64 / scale as f64).round() as i64;
    t.clamp(-(qmax as i64), qmax as i64) as i32
}

fn round_with(rounding: Rounding, v: f32, scale: f32, qmax: i32) -> (i32, bool) {
    let code = match rounding {
        Rounding::PseudoStochastic => pseudo_stochastic_round(v, scale, qmax),
        Rounding::Nearest => nearest_round(v, scale, qmax),
    };
    let clamped = code.abs() == qmax && (v as f64 / scale as f64).abs() > qmax as f64;
    (code, clamped)
}

pub fn quantize(
    m: &Matrix,
    bits: Bits,
    granularity: Granularity,
    rounding: Rounding,
) -> Result<QuantTensor> {
    let qparams = compute_qparams(m, bits, granularity)?;
    quantize_with(m, qparams, rounding)
}

/// Quantizes against externally supplied parameters; out-of-range values clamp.
pub fn quantize_with(m: &Matrix, qparams: QParams, rounding: Rounding) -> Result<QuantTensor> {
    if !m.all_finite() {
        return Err(HotError::invalid("cannot quantize non-finite values"));
    }
    let expected = qparams.granularity.scale_count(m.rows(), m.cols());
    if qparams.scales.len() != expected {
        return Err(HotError::Granularity(format!(
            "{:?} on {}x{} needs {expected} scales, got {}",
            qparams.granularity,
            m.rows(),
            m.cols(),
            qparams.scales.len()
        )));
    }
    let qmax = qparams.qmax();
    let mut clamped = 0usize;
    let mut codes = Vec::with_capacity(m.len());
    for i in 0..m.rows() {
        for (j, &v) in m.row(i).iter().enumerate() {
            let (code, hit) = round_with(rounding, v, qparams.scale_at(i, j), qmax);
            clamped += usize::from(hit);
            codes.push(code as i8);
        }
    }
    counters::add_quantized(m.len() as u64);
    let codes = match qparams.bits {
        Bits::Int8 => Codes::Int8(codes),
        Bits::Int4 => Codes::Packed4(pack_rows(&codes, m.rows(), m.cols())?),
    };
    Ok(QuantTensor {
        rows: m.rows(),
        cols: m.cols(),
        codes,
        qparams,
        clamped,
    })
}

pub fn dequantize(q: &QuantTensor) -> Matrix {
    let codes = q.codes();
    Matrix::from_fn(q.rows, q.cols, |i, j| {
        codes[i * q.cols + j] as f32 * q.qparams.scale_at(i, j)
    })
}

fn check_nibble(code: i8) -> Result<()> {
    if !(-8..=7).contains(&code) {
        return Err(HotError::invalid(format!("code {code} does not fit a signed nibble")));
    }
    Ok(())
}

/// Packs signed nibbles two per byte, first element in the low nibble. An odd
/// trailing element leaves the final high nibble zero.
pub fn pack_nibbles(codes: &[i8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        check_nibble(pair[0])?;
        let lo = (pair[0] as u8) & 0x0F;
        let hi = match pair.get(1) {
            Some(&c) => {
                check_nibble(c)?;
                (c as u8) & 0x0F
            }
            None => 0,
        };
        out.push(lo | (hi << 4));
    }
    Ok(out)
}

#[inline]
fn sign_extend(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if count > bytes.len() * 2 {
        return Err(HotError::invalid(format!(
            "{count} nibbles requested from {} bytes",
            bytes.len()
        )));
    }
    Ok((0..count)
        .map(|k| {
            let byte = bytes[k / 2];
            sign_extend(if k % 2 == 0 { byte & 0x0F } else { byte >> 4 })
        })
        .collect())
}

fn pack_rows(codes: &[i8], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(rows * cols.div_ceil(2));
    for r in 0..rows {
        out.extend(pack_nibbles(&codes[r * cols..(r + 1) * cols])?);
    }
    Ok(out)
}

impl QuantTensor {
    /// Assembles a tensor from unpacked codes, validating their range.
    pub fn from_codes(rows: usize, cols: usize, codes: &[i8], qparams: QParams) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(HotError::invalid(format!(
                "{} codes for a {rows}x{cols} tensor",
                codes.len()
            )));
        }
        let qmax = qparams.qmax();
        if let Some(c) = codes.iter().find(|c| (**c as i32).abs() > qmax) {
            return Err(HotError::invalid(format!("code {c} outside ±{qmax}")));
        }
        if qparams.scales.len() != qparams.granularity.scale_count(rows, cols) {
            return Err(HotError::Granularity("scale count does not match shape".into()));
        }
        let codes = match qparams.bits {
            Bits::Int8 => Codes::Int8(codes.to_vec()),
            Bits::Int4 => Codes::Packed4(pack_rows(codes, rows, cols)?),
        };
        Ok(Self {
            rows,
            cols,
            codes,
            qparams,
            clamped: 0,
        })
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

    pub fn bits(&self) -> Bits {
        self.qparams.bits
    }

    pub fn qparams(&self) -> &QParams {
        &self.qparams
    }

    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn raw_codes(&self) -> &Codes {
        &self.codes
    }

    /// Unpacked codes in row-major order.
    pub fn codes(&self) -> Vec<i8> {
        match &self.codes {
            Codes::Int8(c) => c.clone(),
            Codes::Packed4(bytes) => {
                let per_row = self.cols.div_ceil(2);
                let mut out = Vec::with_capacity(self.rows * self.cols);
                for r in 0..self.rows {
                    let row = &bytes[r * per_row..(r + 1) * per_row];
                    out.extend(unpack_nibbles(row, self.cols).expect("row length"));
                }
                out
            }
        }
    }

    pub fn payload_bytes(&self) -> usize {
        match &self.codes {
            Codes::Int8(c) => c.len(),
            Codes::Packed4(b) => b.len(),
        }
    }

    pub fn scale_bytes(&self) -> usize {
        self.qparams.scales.len() * 4
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(QUANT_MAGIC)?;
        w.write_all(&[self.qparams.bits.width(), self.qparams.granularity.tag()])?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for s in &self.qparams.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        match &self.codes {
            Codes::Int8(c) => w.write_all(&c.iter().map(|&v| v as u8).collect::<Vec<_>>())?,
            Codes::Packed4(b) => w.write_all(b)?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<QuantTensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != QUANT_MAGIC {
            return Err(HotError::Format(format!("bad quant tensor magic {magic:?}")));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let bits = Bits::from_width(head[0]).map_err(|e| HotError::Format(e.to_string()))?;
        let granularity = Granularity::from_tag(head[1])?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let n_scales = granularity.scale_count(rows, cols);
        let mut scale_bytes = vec![0u8; n_scales * 4];
        r.read_exact(&mut scale_bytes)?;
        let scales: Vec<f32> = scale_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(HotError::Format("scales must be finite and positive".into()));
        }
        let payload_len = match bits {
            Bits::Int8 => rows * cols,
            Bits::Int4 => rows * cols.div_ceil(2),
        };
        let mut payload = vec![0u8; payload_len];
        r.read_exact(&mut payload)?;
        let qparams = QParams {
            bits,
            granularity,
            scales,
        };
        let codes: Vec<i8> = match bits {
            Bits::Int8 => payload.iter().map(|&b| b as i8).collect(),
            Bits::Int4 => {
                let per_row = cols.div_ceil(2);
                let mut out = Vec::with_capacity(rows * cols);
                for row in 0..rows {
                    out.extend(unpack_nibbles(&payload[row * per_row..(row + 1) * per_row], cols)?);
                }
                out
            }
        };
        QuantTensor::from_codes(rows, cols, &codes, qparams)
            .map_err(|e| HotError::Format(e.to_string()))
    }
}
