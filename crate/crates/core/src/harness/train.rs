//! Training loop: FP forward, HOT (or FP oracle) backward, ABC buffers
//! between the passes, optional LQS policy, AdamW or SGD updates.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backward::{BackwardConfig, GradGranularity, GwMode, GxMode, Precision};
use crate::cost::{memory_report, CostReport};
use crate::error::{HotError, Result};
use crate::harness::data::Dataset;
use crate::harness::loss::{accuracy, softmax_cross_entropy};
use crate::harness::model::{Model, TraceOptions};
use crate::harness::optim::{adamw_step, cosine_lr, sgd_step, AdamHyper, AdamState};
use crate::linalg::{Matrix, Rng};
use crate::lqs::{mse, QuantPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FpOracle,
    Hot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub cosine: bool,
    pub optimizer: OptimizerKind,
    pub adam: AdamHyper,
    /// Epochs at the start that run every quantizer at INT8. `None` picks
    /// 10% of the epochs, or 0 when the model carries LoRA adapters.
    pub warmup_epochs: Option<usize>,
    pub seed: u64,
    pub backward: BackwardConfig,
    pub overrides: BTreeMap<String, BackwardConfig>,
    pub policy: Option<QuantPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spill_dir: Option<PathBuf>,
    pub track_grad_mse: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Hot,
            epochs: 200,
            batch_size: 64,
            lr: 0.01,
            min_lr: 0.0,
            cosine: true,
            optimizer: OptimizerKind::Adamw,
            adam: AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            },
            warmup_epochs: None,
            seed: 0,
            backward: BackwardConfig::default(),
            overrides: BTreeMap::new(),
            policy: None,
            spill_dir: None,
            track_grad_mse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub warmup: bool,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub id: String,
    pub in_features: usize,
    pub out_features: usize,
    pub frozen: bool,
    pub backward: BackwardConfig,
    /// Mean over steps of MSE(HOT g_w, FP g_w).
    pub gw_mse: Option<f64>,
    /// Mean over steps of MSE(HOT g_x, FP g_x).
    pub gx_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub mode: TrainMode,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    pub layers: Vec<LayerRecord>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub cost: CostReport,
    pub policy: Option<BTreeMap<String, GradGranularity>>,
    /// Elapsed seconds; kept out of the serialized record so reports compare
    /// byte for byte.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

fn upgrade(p: Precision) -> Precision {
    match p {
        Precision::Int4 => Precision::Int8,
        other => other,
    }
}

/// Every INT4 quantizer replaced by INT8.
pub fn warmup_config(cfg: BackwardConfig) -> BackwardConfig {
    let gx = match cfg.gx_mode {
        GxMode::Hq(p) => GxMode::Hq(upgrade(p)),
        GxMode::PlainQuant(p) => GxMode::PlainQuant(upgrade(p)),
        other => other,
    };
    let gw = match cfg.gw_mode {
        GwMode::Hla(p) => GwMode::Hla(upgrade(p)),
        GwMode::Hq(p) => GwMode::Hq(upgrade(p)),
        other => other,
    };
    cfg.with_gx(gx).with_gw(gw)
}

/// Resolved per-layer configuration of a HOT run.
pub fn layer_configs(model: &Model, cfg: &TrainConfig) -> Result<BTreeMap<String, BackwardConfig>> {
    let ids = model.linear_ids();
    for id in cfg.overrides.keys() {
        if !ids.contains(id) {
            return Err(HotError::invalid(format!("config names unknown layer {id}")));
        }
    }
    if let Some(policy) = &cfg.policy {
        policy.validate_layers(ids.iter().map(String::as_str))?;
    }
    let mut out = BTreeMap::new();
    for id in ids {
        let mut c = cfg.overrides.get(&id).copied().unwrap_or(cfg.backward);
        c.hadamard.validate()?;
        match &cfg.policy {
            Some(policy) => {
                c.gw_granularity = policy.get(&id).unwrap_or(GradGranularity::PerTensor);
            }
            None if c.gw_granularity == GradGranularity::PerToken => {
                return Err(HotError::invalid(format!(
                    "layer {id} uses per-token gradient scales but no policy was given"
                )));
            }
            None => {}
        }
        out.insert(id, c);
    }
    Ok(out)
}

fn trace_options(cfg: &TrainConfig, configs: &BTreeMap<String, BackwardConfig>, warm: bool) -> TraceOptions {
    match cfg.mode {
        TrainMode::FpOracle => TraceOptions::fp(),
        TrainMode::Hot => {
            let adjust = |c: BackwardConfig| if warm { warmup_config(c) } else { c };
            let mut opts = TraceOptions::hot(adjust(cfg.backward));
            opts.overrides = configs.iter().map(|(k, v)| (k.clone(), adjust(*v))).collect();
            opts.spill_dir = cfg.spill_dir.clone();
            opts
        }
    }
}

/// Accuracy and mean loss over the whole dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(HotError::Data("cannot evaluate an empty dataset".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0f64, 0f64);
    for batch in data.batches(&order, 256) {
        let logits = model.predict(&batch.inputs)?;
        let n = batch.labels.len() as f64;
        loss += softmax_cross_entropy(&logits, &batch.labels)?.0 * n;
        correct += accuracy(&logits, &batch.labels) * n;
    }
    Ok((loss / data.len() as f64, correct / data.len() as f64))
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRecord> {
    let start = Instant::now();
    if data.is_empty() {
        return Err(HotError::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(HotError::invalid("batch_size must be positive"));
    }
    if data.seq_len != model.seq_len() {
        return Err(HotError::Data(format!(
            "dataset has {} rows per sample but the model expects {}",
            data.seq_len,
            model.seq_len()
        )));
    }
    model.validate()?;
    let configs = match cfg.mode {
        TrainMode::Hot => layer_configs(model, cfg)?,
        TrainMode::FpOracle => model.linear_ids().into_iter().map(|id| (id, BackwardConfig::fp())).collect(),
    };
    let has_lora = model.linear_layers().iter().any(|l| l.lora.is_some());
    let warmup = cfg
        .warmup_epochs
        .unwrap_or(if has_lora { 0 } else { cfg.epochs / 10 });
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = Rng::new(cfg.seed).fork(0x0074_7261_696e);
    let mut adam: BTreeMap<String, AdamState> = BTreeMap::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut mse_sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let warm = cfg.mode == TrainMode::Hot && epoch < warmup;
        let mut opts = trace_options(cfg, &configs, warm);
        opts.capture = cfg.track_grad_mse;
        rng.shuffle(&mut order);
        let mut loss_sum = 0f64;
        let mut lr = cfg.lr;
        for batch in data.batches(&order, cfg.batch_size) {
            lr = if cfg.cosine {
                cosine_lr(cfg.lr, cfg.min_lr, step, total_steps)
            } else {
                cfg.lr
            };
            let trace = model.forward_trace(&batch.inputs, &opts)?;
            let (loss, grad) = softmax_cross_entropy(trace.output(), &batch.labels)?;
            if !loss.is_finite() {
                return Err(HotError::NonFinite {
                    stage: "loss".into(),
                    layer: model.linear_ids().last().cloned().unwrap_or_default(),
                });
            }
            loss_sum += loss * batch.labels.len() as f64;
            let grads = model.backward(&trace, &grad)?;
            drop(trace);
            if cfg.track_grad_mse {
                let fp_trace = model.forward_trace(&batch.inputs, &TraceOptions::fp().capture())?;
                let fp = model.backward(&fp_trace, &grad)?;
                for (h, f) in grads.linear.iter().zip(&fp.linear) {
                    let entry = mse_sums.entry(h.id.clone()).or_default();
                    if let (Some(a), Some(b)) = (&h.gw, &f.gw) {
                        entry.0 += mse(a, b)?;
                    }
                    if let (Some(a), Some(b)) = (&h.gx, &f.gx) {
                        entry.1 += mse(a, b)?;
                    }
                    entry.2 += 1;
                }
            }
            let param_grads = grads.param_grads();
            for (key, params) in model.params_mut() {
                let g = param_grads
                    .get(&key)
                    .ok_or_else(|| HotError::invalid(format!("no gradient for parameter {key}")))?;
                match cfg.optimizer {
                    OptimizerKind::Sgd => sgd_step(params, g, lr as f32)?,
                    OptimizerKind::Adamw => adamw_step(params, g, adam.entry(key).or_default(), lr, &cfg.adam)?,
                }
            }
            step += 1;
        }
        let (_, acc) = evaluate(model, data)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            warmup: warm,
            loss: loss_sum / data.len() as f64,
            accuracy: acc,
        });
    }
    let (final_loss, final_accuracy) = evaluate(model, data)?;
    let layers = model
        .linear_layers()
        .iter()
        .map(|l| {
            let stats = mse_sums.get(&l.id);
            let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
            let frozen = l.lora.is_some();
            LayerRecord {
                id: l.id.clone(),
                in_features: l.in_features(),
                out_features: l.out_features(),
                frozen,
                backward: configs[&l.id],
                gw_mse: stats.and_then(|s| if frozen { None } else { mean(s.0, s.2) }),
                gx_mse: stats.and_then(|s| mean(s.1, s.2)),
            }
        })
        .collect();
    let mut cost_opts = TraceOptions::hot(cfg.backward);
    cost_opts.overrides = configs.clone();
    let cost = memory_report(model, cfg.batch_size.min(data.len()), data.seq_len, &cost_opts)?;
    Ok(TrainRecord {
        seed: cfg.seed,
        mode: cfg.mode,
        config: serde_json::to_value(cfg).map_err(|e| HotError::Format(e.to_string()))?,
        epochs,
        layers,
        final_loss,
        final_accuracy,
        cost,
        policy: cfg.policy.as_ref().map(|p| p.entries.clone()),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Snapshot of every linear layer's frozen weights (LoRA bases).
pub fn frozen_weights(model: &Model) -> Vec<(String, Matrix)> {
    model
        .linear_layers()
        .iter()
        .filter(|l| l.lora.is_some())
        .map(|l| (l.id.clone(), l.weight.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hadamard::HadamardConfig;
    use crate::harness::data::{fourier_features, make_spirals};

    fn spirals(seed: u64) -> Dataset {
        make_spirals(128, 0.05, seed)
            .unwrap()
            .map_inputs(|x| fourier_features(x, 32, 1.0, 99).unwrap())
            .unwrap()
    }

    fn small_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 3,
            batch_size: 32,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let data = spirals(1);
        for mode in [TrainMode::FpOracle, TrainMode::Hot] {
            let run = || {
                let mut m = Model::mlp(&[32, 64, 2], false, &mut Rng::new(3)).unwrap();
                let r = train(&mut m, &data, &small_cfg(mode)).unwrap();
                (m, serde_json::to_string(&r).unwrap())
            };
            let (m1, r1) = run();
            let (m2, r2) = run();
            assert_eq!(m1, m2);
            assert_eq!(r1, r2);
        }
    }

    #[test]
    fn lossless_hot_matches_fp() {
        let data = spirals(2);
        let lossless = BackwardConfig::default()
            .with_gx(GxMode::Hq(Precision::Disabled))
            .with_gw(GwMode::Hla(Precision::Disabled))
            .with_hadamard(HadamardConfig::default().with_rank(16));
        let mut fp = Model::mlp(&[32, 64, 2], false, &mut Rng::new(3)).unwrap();
        let mut hot = fp.clone();
        train(&mut fp, &data, &small_cfg(TrainMode::FpOracle)).unwrap();
        let cfg = TrainConfig {
            backward: lossless,
            ..small_cfg(TrainMode::Hot)
        };
        train(&mut hot, &data, &cfg).unwrap();
        for (a, b) in fp.linear_layers().iter().zip(hot.linear_layers()) {
            assert!(b.weight.relative_error(&a.weight) < 1e-3);
        }
    }

    #[test]
    fn spill_changes_nothing() {
        let data = spirals(3);
        let dir = tempfile::tempdir().unwrap();
        let mut a = Model::mlp(&[32, 64, 2], false, &mut Rng::new(5)).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &small_cfg(TrainMode::Hot)).unwrap();
        let cfg = TrainConfig {
            spill_dir: Some(dir.path().to_path_buf()),
            ..small_cfg(TrainMode::Hot)
        };
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
    }

    #[test]
    fn lora_freezes_base() {
        let data = spirals(4);
        let mut rng = Rng::new(6);
        let mut m = Model::mlp(&[32, 64, 2], false, &mut rng).unwrap();
        m.add_lora(4, 1.0, &mut rng).unwrap();
        let before = m.clone();
        let frozen = frozen_weights(&m);
        train(&mut m, &data, &small_cfg(TrainMode::Hot)).unwrap();
        assert_eq!(frozen, frozen_weights(&m));
        for (a, b) in before.linear_layers().iter().zip(m.linear_layers()) {
            assert_eq!(a.bias, b.bias);
            assert_ne!(a.lora.as_ref().unwrap().a, b.lora.as_ref().unwrap().a);
            assert_ne!(a.lora.as_ref().unwrap().b, b.lora.as_ref().unwrap().b);
        }
    }

    #[test]
    fn per_token_needs_policy() {
        let data = spirals(5);
        let mut m = Model::mlp(&[32, 64, 2], false, &mut Rng::new(7)).unwrap();
        let cfg = TrainConfig {
            backward: BackwardConfig::default().with_granularity(GradGranularity::PerToken),
            ..small_cfg(TrainMode::Hot)
        };
        assert!(train(&mut m, &data, &cfg).is_err());
        let policy = QuantPolicy::parse("fc0=per_token\nfc1=per_tensor\n").unwrap();
        let cfg = TrainConfig {
            policy: Some(policy),
            track_grad_mse: true,
            ..cfg
        };
        let rec = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(rec.layers[0].backward.gw_granularity, GradGranularity::PerToken);
        assert_eq!(rec.layers[1].backward.gw_granularity, GradGranularity::PerTensor);
        assert!(rec.layers.iter().all(|l| l.gw_mse.unwrap() > 0.0));
        let bad = QuantPolicy::parse("fc0=per_token\nfc9=per_tensor\n").unwrap();
        let cfg = TrainConfig { policy: Some(bad), ..cfg };
        assert!(train(&mut m, &data, &cfg).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = Dataset::new(Matrix::zeros(0, 32), vec![], 2, 1).unwrap();
        let mut m = Model::mlp(&[32, 64, 2], false, &mut Rng::new(7)).unwrap();
        assert!(matches!(train(&mut m, &data, &small_cfg(TrainMode::Hot)), Err(HotError::Data(_))));
    }

    #[test]
    fn transformer_trains_in_hot_mode() {
        let data = crate::harness::data::make_token_task(32, 8, 16, 1).unwrap();
        let mut m = Model::transformer(16, 16, 32, 8, 1, 2, &mut Rng::new(2)).unwrap();
        let rec = train(&mut m, &data, &TrainConfig { batch_size: 8, ..small_cfg(TrainMode::Hot) }).unwrap();
        assert!(rec.epochs.iter().all(|e| e.loss.is_finite()));
        assert_eq!(rec.layers.len(), 6);
    }

    #[test]
    fn warmup_upgrades_int4() {
        let c = warmup_config(BackwardConfig::default().with_gw(GwMode::Hla(Precision::Int4)));
        assert_eq!(c.gx_mode, GxMode::Hq(Precision::Int8));
        assert_eq!(c.gw_mode, GwMode::Hla(Precision::Int8));
    }
}
