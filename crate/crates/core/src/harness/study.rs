//! Layer-wise gradient error study: per backward mode, the MSE of every
//! linear layer's `g_x` and `g_w` against the FP backward.

use serde::Serialize;

use crate::backward::{BackwardConfig, GwMode, GxMode};
use crate::error::{HotError, Result};
use crate::harness::data::Batch;
use crate::harness::loss::softmax_cross_entropy;
use crate::harness::model::{Model, ModelGrads, TraceOptions};
use crate::linalg::{Matrix, Rng};
use crate::lqs::mse;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyMode {
    pub name: String,
    pub config: BackwardConfig,
}

impl StudyMode {
    pub fn new(name: impl Into<String>, config: BackwardConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerError {
    pub layer: String,
    /// 0 for the layer next to the loss.
    pub depth_from_output: usize,
    pub gx_mse: f64,
    pub gw_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeErrors {
    pub name: String,
    pub gx_path: bool,
    pub gw_path: bool,
    pub layers: Vec<LayerError>,
    /// Rank correlation of the per-layer MSE with depth from the output;
    /// absent when the errors are constant.
    pub spearman_gx: Option<f64>,
    pub spearman_gw: Option<f64>,
    pub median_gx_mse: f64,
    pub median_gw_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTable {
    pub layers: Vec<String>,
    pub modes: Vec<ModeErrors>,
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

fn run(model: &Model, x: &Matrix, grad_out: &Matrix, cfg: BackwardConfig) -> Result<ModelGrads> {
    let trace = model.forward_trace(x, &TraceOptions::with_config(cfg, false).capture())?;
    model.backward(&trace, grad_out)
}

/// Backpropagates `grad_out` once in FP and once per mode, recording the
/// per-layer MSE of both gradients.
pub fn layerwise_error_study_with_grad(
    model: &Model,
    x: &Matrix,
    grad_out: &Matrix,
    modes: &[StudyMode],
) -> Result<StudyTable> {
    let ids = model.linear_ids();
    if ids.len() < 2 {
        return Err(HotError::invalid("the error study needs at least two linear layers"));
    }
    let fp = run(model, x, grad_out, BackwardConfig::fp())?;
    let n = ids.len();
    let mut out = Vec::with_capacity(modes.len());
    for mode in modes {
        let approx = run(model, x, grad_out, mode.config)?;
        let mut layers = Vec::with_capacity(n);
        for (k, (a, f)) in approx.linear.iter().zip(&fp.linear).enumerate() {
            let pair = |p: &Option<Matrix>, q: &Option<Matrix>| match (p, q) {
                (Some(p), Some(q)) => mse(p, q),
                _ => Ok(0.0),
            };
            layers.push(LayerError {
                layer: a.id.clone(),
                depth_from_output: n - 1 - k,
                gx_mse: pair(&a.gx, &f.gx)?,
                gw_mse: pair(&a.gw, &f.gw)?,
            });
        }
        let depth: Vec<f64> = layers.iter().map(|l| l.depth_from_output as f64).collect();
        let gx: Vec<f64> = layers.iter().map(|l| l.gx_mse).collect();
        let gw: Vec<f64> = layers.iter().map(|l| l.gw_mse).collect();
        out.push(ModeErrors {
            name: mode.name.clone(),
            gx_path: mode.config.gx_mode != GxMode::Fp,
            gw_path: mode.config.gw_mode != GwMode::Fp,
            spearman_gx: spearman(&gx, &depth),
            spearman_gw: spearman(&gw, &depth),
            median_gx_mse: median(&gx),
            median_gw_mse: median(&gw),
            layers,
        });
    }
    Ok(StudyTable { layers: ids, modes: out })
}

/// The study with the cross-entropy gradient of `batch` at the output.
pub fn layerwise_error_study(model: &Model, batch: &Batch, modes: &[StudyMode]) -> Result<StudyTable> {
    let logits = model.predict(&batch.inputs)?;
    let (_, grad) = softmax_cross_entropy(&logits, &batch.labels)?;
    layerwise_error_study_with_grad(model, &batch.inputs, &grad, modes)
}

/// Token-smooth inputs: rows are grouped into patches of 16 tokens laid out
/// as 4 × 4 grids, and each column is a random planar ramp over the grid plus
/// small noise, so neighbouring tokens are strongly correlated.
pub fn smooth_tokens(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for start in (0..rows).step_by(16) {
        for c in 0..cols {
            let (base, gx, gy) = (rng.standard_normal(), 0.3 * rng.standard_normal(), 0.3 * rng.standard_normal());
            for t in start..(start + 16).min(rows) {
                let k = t - start;
                let (a, b) = ((k / 4) as f64 - 1.5, (k % 4) as f64 - 1.5);
                let v = base + gx * a + gy * b + 0.05 * rng.standard_normal();
                m.set(t, c, v as f32);
            }
        }
    }
    m
}

/// The modes of the standard study: each approximates one path.
pub fn standard_modes(hadamard: crate::hadamard::HadamardConfig) -> Vec<StudyMode> {
    use crate::backward::Precision;
    let fp = BackwardConfig::fp().with_hadamard(hadamard);
    vec![
        StudyMode::new("hq_int4_gx", fp.with_gx(GxMode::Hq(Precision::Int4))),
        StudyMode::new("internal_hla_gx", fp.with_gx(GxMode::InternalHla)),
        StudyMode::new("external_hla_gx", fp.with_gx(GxMode::ExternalHla)),
        StudyMode::new("hq_int4_gw", fp.with_gw(GwMode::Hq(Precision::Int4))),
        StudyMode::new("hla_int8_gw", fp.with_gw(GwMode::Hla(Precision::Int8))),
    ]
}

/// Standard study: `depth` ReLU-chained `width × width` layers at random
/// initialization, `tokens` token-smooth input rows, and a standard normal
/// gradient at the output, all drawn from `seed`.
pub fn standard_study(
    seed: u64,
    width: usize,
    depth: usize,
    tokens: usize,
    hadamard: crate::hadamard::HadamardConfig,
) -> Result<StudyTable> {
    use crate::linalg::{random_matrix, Distribution};
    let mut rng = Rng::new(seed);
    let model = Model::chain(width, depth, &mut rng.fork(1))?;
    let x = smooth_tokens(tokens, width, &mut rng.fork(2));
    let g = random_matrix(&mut rng.fork(3), tokens, width, Distribution::Normal { mean: 0.0, std: 1.0 })?;
    layerwise_error_study_with_grad(&model, &x, &g, &standard_modes(hadamard))
}

impl StudyTable {
    /// Aligned plain-text rendering: one row per layer, one `g_x`/`g_w` column
    /// pair per mode.
    pub fn to_text(&self) -> String {
        let mut header = vec![format!("{:<12}", "layer"), format!("{:>5}", "depth")];
        for m in &self.modes {
            header.push(format!("{:>14}", format!("{}:gx", m.name)));
            header.push(format!("{:>14}", format!("{}:gw", m.name)));
        }
        let mut lines = vec![header.join(" ")];
        for (k, id) in self.layers.iter().enumerate() {
            let depth = self.layers.len() - 1 - k;
            let mut row = vec![format!("{id:<12}"), format!("{depth:>5}")];
            for m in &self.modes {
                row.push(format!("{:>14.6e}", m.layers[k].gx_mse));
                row.push(format!("{:>14.6e}", m.layers[k].gw_mse));
            }
            lines.push(row.join(" "));
        }
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |s| format!("{s:.4}"));
        for m in &self.modes {
            lines.push(format!(
                "{}: spearman gx {} gw {}, median gx {:.6e} gw {:.6e}",
                m.name,
                fmt(m.spearman_gx),
                fmt(m.spearman_gw),
                m.median_gx_mse,
                m.median_gw_mse
            ));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
