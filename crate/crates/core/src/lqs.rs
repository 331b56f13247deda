//! Layer-wise quantizer selection: per layer, compare the quantization error
//! of `g_y` under per-token and per-tensor scales on calibration batches and
//! pick per-token only when it removes at least `threshold` of the error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::backward::{GradGranularity, TokenAxis};
use crate::error::{HotError, Result};
use crate::harness::model::{Model, TraceOptions};
use crate::harness::Batch;
use crate::linalg::Matrix;
use crate::quantizer::{dequantize, quantize, Bits, Granularity, Rounding};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CALIBRATION_BATCHES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantPolicy {
    pub entries: BTreeMap<String, GradGranularity>,
    pub seed: u64,
    pub batches: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSelection {
    pub layer_id: String,
    pub e_token: f64,
    pub e_tensor: f64,
    pub choice: GradGranularity,
}

impl QuantPolicy {
    pub fn get(&self, layer_id: &str) -> Option<GradGranularity> {
        self.entries.get(layer_id).copied()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# threshold={}", self.threshold);
        let _ = writeln!(out, "# batches={}", self.batches);
        for (id, choice) in &self.entries {
            let _ = writeln!(out, "{id}={}", granularity_name(*choice));
        }
        out
    }

    pub fn parse(text: &str) -> Result<QuantPolicy> {
        let mut entries = BTreeMap::new();
        let mut seed = 0u64;
        let mut batches = 0usize;
        let mut threshold = DEFAULT_THRESHOLD;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| HotError::Parse { line: line_no, msg };
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((key, value)) = comment.trim().split_once('=') {
                    let value = value.trim();
                    match key.trim() {
                        "seed" => seed = value.parse().map_err(|e| parse_err(format!("seed: {e}")))?,
                        "threshold" => {
                            threshold = value.parse().map_err(|e| parse_err(format!("threshold: {e}")))?
                        }
                        "batches" => {
                            batches = value.parse().map_err(|e| parse_err(format!("batches: {e}")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let (id, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected layer_id=per_token|per_tensor, got {line:?}")))?;
            let id = id.trim();
            if id.is_empty() {
                return Err(parse_err("empty layer id".into()));
            }
            let choice = match value.trim() {
                "per_token" => GradGranularity::PerToken,
                "per_tensor" => GradGranularity::PerTensor,
                other => return Err(parse_err(format!("unknown granularity {other:?}"))),
            };
            if entries.insert(id.to_string(), choice).is_some() {
                return Err(parse_err(format!("duplicate layer_id {id}")));
            }
        }
        if entries.is_empty() {
            return Err(HotError::Parse {
                line: 0,
                msg: "no entries".into(),
            });
        }
        Ok(QuantPolicy {
            entries,
            seed,
            batches,
            threshold,
        })
    }

    /// Checks that the policy covers exactly the given HOT-managed layers.
    pub fn validate_layers<'a>(&self, layer_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let ids: Vec<&str> = layer_ids.into_iter().collect();
        for id in self.entries.keys() {
            if !ids.contains(&id.as_str()) {
                return Err(HotError::invalid(format!("policy names unknown layer {id}")));
            }
        }
        for id in &ids {
            if !self.entries.contains_key(*id) {
                return Err(HotError::invalid(format!("policy has no entry for layer {id}")));
            }
        }
        Ok(())
    }
}

pub fn granularity_name(g: GradGranularity) -> &'static str {
    match g {
        GradGranularity::PerToken => "per_token",
        GradGranularity::PerTensor => "per_tensor",
    }
}

pub fn save_policy(policy: &QuantPolicy, path: &Path) -> Result<()> {
    std::fs::write(path, policy.to_text())?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<QuantPolicy> {
    QuantPolicy::parse(&std::fs::read_to_string(path)?)
}

/// Mean squared difference with FP64 accumulation.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(HotError::Shape {
            op: "mse",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

fn quant_error(gy: &Matrix, granularity: Granularity) -> Result<f64> {
    let q = quantize(gy, Bits::Int8, granularity, Rounding::Nearest)?;
    mse(gy, &dequantize(&q))
}

/// The selection rule on batch-averaged errors: per-token iff
/// `(e_tensor − e_token) / e_tensor ≥ threshold`.
pub fn choose(e_token: f64, e_tensor: f64, threshold: f64) -> GradGranularity {
    if e_tensor > 0.0 && (e_tensor - e_token) / e_tensor >= threshold {
        GradGranularity::PerToken
    } else {
        GradGranularity::PerTensor
    }
}

/// Averages both errors over the captured gradients of one layer and applies
/// the rule. Tokens are rows for [`TokenAxis::Contracted`] and output channels
/// (columns of `g_y`) for [`TokenAxis::Output`].
pub fn select_granularity(
    layer_id: &str,
    samples: &[Matrix],
    threshold: f64,
    axis: TokenAxis,
) -> Result<LayerSelection> {
    if samples.is_empty() {
        return Err(HotError::invalid(format!("no captured gradient for layer {layer_id}")));
    }
    let token = match axis {
        TokenAxis::Contracted => Granularity::PerRow,
        TokenAxis::Output => Granularity::PerCol,
    };
    let mut e_token = 0.0;
    let mut e_tensor = 0.0;
    for gy in samples {
        e_token += quant_error(gy, token)?;
        e_tensor += quant_error(gy, Granularity::PerTensor)?;
    }
    e_token /= samples.len() as f64;
    e_tensor /= samples.len() as f64;
    Ok(LayerSelection {
        layer_id: layer_id.to_string(),
        e_token,
        e_tensor,
        choice: choose(e_token, e_tensor, threshold),
    })
}

/// Runs forward and FP backward on each batch, captures every linear layer's
/// `g_y`, and selects a granularity per layer.
pub fn calibrate(
    model: &Model,
    batches: &[Batch],
    threshold: f64,
    seed: u64,
    axis: TokenAxis,
) -> Result<(QuantPolicy, Vec<LayerSelection>)> {
    if batches.is_empty() {
        return Err(HotError::invalid("calibration needs at least one batch"));
    }
    let mut captured: BTreeMap<String, Vec<Matrix>> = BTreeMap::new();
    for batch in batches {
        let trace = model.forward_trace(&batch.inputs, &TraceOptions::fp().capture())?;
        let (_, grad) = crate::harness::loss::softmax_cross_entropy(trace.output(), &batch.labels)?;
        let grads = model.backward(&trace, &grad)?;
        for lg in grads.linear {
            let gy = lg
                .gy
                .ok_or_else(|| HotError::invalid(format!("layer {} produced no gradient", lg.id)))?;
            captured.entry(lg.id).or_default().push(gy);
        }
    }
    let mut entries = BTreeMap::new();
    let mut selections = Vec::new();
    for id in model.linear_ids() {
        let samples = captured
            .get(&id)
            .ok_or_else(|| HotError::invalid(format!("layer {id} has no captured gradient")))?;
        let sel = select_granularity(&id, samples, threshold, axis)?;
        entries.insert(id, sel.choice);
        selections.push(sel);
    }
    Ok((
        QuantPolicy {
            entries,
            seed,
            batches: batches.len(),
            threshold,
        },
        selections,
    ))
}
