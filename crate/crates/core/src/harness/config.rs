//! Run configuration: `key = value` lines, `#` comments, and optional
//! `[layer <id>]` sections overriding `tile`, `rank`, `gx_bits`, `gw_bits`
//! and `gw_granularity` for one linear layer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backward::{BackwardConfig, GradGranularity, GwMode, GxMode, Precision};
use crate::error::{HotError, Result};
use crate::hadamard::{BasisOrdering, HadamardConfig};
use crate::harness::data::{fourier_features, load_idx, make_spirals, make_token_task, Dataset};
use crate::harness::model::Model;
use crate::harness::optim::AdamHyper;
use crate::harness::train::{train, OptimizerKind, TrainConfig, TrainMode, TrainRecord};
use crate::linalg::Rng;
use crate::lqs::load_policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Spirals,
    Tokens,
    Idx,
}

/// Quantizer width of one path: 4, 8, 32 (transform kept, quantization off)
/// or `fp` (plain FP path).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathBitsSetting {
    Int4,
    Int8,
    Fp32,
    Fp,
}

impl PathBitsSetting {
    fn parse(v: &str) -> std::result::Result<Self, String> {
        match v {
            "4" => Ok(Self::Int4),
            "8" => Ok(Self::Int8),
            "32" => Ok(Self::Fp32),
            "fp" => Ok(Self::Fp),
            _ => Err(format!("expected 4, 8, 32 or fp, got {v:?}")),
        }
    }

    fn precision(self) -> Option<Precision> {
        match self {
            Self::Int4 => Some(Precision::Int4),
            Self::Int8 => Some(Precision::Int8),
            Self::Fp32 => Some(Precision::Disabled),
            Self::Fp => None,
        }
    }

    fn gx_mode(self) -> GxMode {
        self.precision().map_or(GxMode::Fp, GxMode::Hq)
    }

    fn gw_mode(self) -> GwMode {
        self.precision().map_or(GwMode::Fp, GwMode::Hla)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LayerSection {
    pub tile: Option<usize>,
    pub rank: Option<usize>,
    pub gx_bits: Option<PathBitsSetting>,
    pub gw_bits: Option<PathBitsSetting>,
    pub gw_granularity: Option<GradGranularity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub model: ModelKind,
    pub hidden: usize,
    pub features: usize,
    pub lora_rank: usize,
    pub lora_scaling: f32,
    pub dataset: DataKind,
    pub samples: usize,
    pub noise: f64,
    pub seq_len: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub warmup_epochs: Option<usize>,
    pub tile: usize,
    pub rank: usize,
    pub gx_bits: PathBitsSetting,
    pub gw_bits: PathBitsSetting,
    pub gw_granularity: GradGranularity,
    pub policy_path: Option<PathBuf>,
    pub track_grad_mse: bool,
    pub spill_dir: Option<PathBuf>,
    pub layers: BTreeMap<String, LayerSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Hot,
            seed: 0,
            model: ModelKind::Mlp,
            hidden: 64,
            features: 32,
            lora_rank: 0,
            lora_scaling: 1.0,
            dataset: DataKind::Spirals,
            samples: 512,
            noise: 0.05,
            seq_len: 8,
            idx_images: None,
            idx_labels: None,
            epochs: 200,
            batch_size: 64,
            lr: 0.01,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
            warmup_epochs: None,
            tile: 16,
            rank: 8,
            gx_bits: PathBitsSetting::Int4,
            gw_bits: PathBitsSetting::Int8,
            gw_granularity: GradGranularity::PerTensor,
            policy_path: None,
            track_grad_mse: false,
            spill_dir: None,
            layers: BTreeMap::new(),
        }
    }
}

fn parse_granularity(v: &str) -> std::result::Result<GradGranularity, String> {
    match v {
        "per_tensor" => Ok(GradGranularity::PerTensor),
        "per_token" => Ok(GradGranularity::PerToken),
        _ => Err(format!("expected per_tensor or per_token, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |msg: String| HotError::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {line:?}")))?;
                let id = inner
                    .trim()
                    .strip_prefix("layer")
                    .map(str::trim)
                    .filter(|id| !id.is_empty())
                    .ok_or_else(|| err(format!("expected [layer <id>], got {line:?}")))?;
                if cfg.layers.contains_key(id) {
                    return Err(err(format!("duplicate section for layer {id}")));
                }
                cfg.layers.insert(id.to_string(), LayerSection::default());
                section = Some(id.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let result = match &section {
                Some(id) => cfg.set_layer_key(id.clone(), key, value),
                None => cfg.set_key(key, value),
            };
            result.map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set_layer_key(&mut self, id: String, key: &str, value: &str) -> std::result::Result<(), String> {
        let sec = self.layers.entry(id).or_default();
        match key {
            "tile" => sec.tile = Some(parse_num(value)?),
            "rank" => sec.rank = Some(parse_num(value)?),
            "gx_bits" => sec.gx_bits = Some(PathBitsSetting::parse(value)?),
            "gw_bits" => sec.gw_bits = Some(PathBitsSetting::parse(value)?),
            "gw_granularity" => sec.gw_granularity = Some(parse_granularity(value)?),
            _ => return Err(format!("unknown layer key {key:?}")),
        }
        Ok(())
    }

    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        match key {
            "mode" => {
                self.mode = match value {
                    "fp" | "fp_oracle" => TrainMode::FpOracle,
                    "hot" => TrainMode::Hot,
                    _ => return Err(format!("expected fp or hot, got {value:?}")),
                }
            }
            "seed" => self.seed = parse_num(value)?,
            "model" => {
                self.model = match value {
                    "mlp" => ModelKind::Mlp,
                    "transformer" => ModelKind::Transformer,
                    _ => return Err(format!("expected mlp or transformer, got {value:?}")),
                }
            }
            "hidden" => self.hidden = parse_num(value)?,
            "features" => self.features = parse_num(value)?,
            "lora_rank" => self.lora_rank = parse_num(value)?,
            "lora_scaling" => self.lora_scaling = parse_num(value)?,
            "dataset" => {
                self.dataset = match value {
                    "spirals" => DataKind::Spirals,
                    "tokens" => DataKind::Tokens,
                    "idx" => DataKind::Idx,
                    _ => return Err(format!("expected spirals, tokens or idx, got {value:?}")),
                }
            }
            "samples" => self.samples = parse_num(value)?,
            "noise" => self.noise = parse_num(value)?,
            "seq_len" => self.seq_len = parse_num(value)?,
            "idx_images" => self.idx_images = path(),
            "idx_labels" => self.idx_labels = path(),
            "epochs" => self.epochs = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "lr" => self.lr = parse_num(value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::Adamw,
                    _ => return Err(format!("expected sgd or adamw, got {value:?}")),
                }
            }
            "weight_decay" => self.weight_decay = parse_num(value)?,
            "warmup_epochs" => self.warmup_epochs = Some(parse_num(value)?),
            "tile" => self.tile = parse_num(value)?,
            "rank" => self.rank = parse_num(value)?,
            "gx_bits" => self.gx_bits = PathBitsSetting::parse(value)?,
            "gw_bits" => self.gw_bits = PathBitsSetting::parse(value)?,
            "gw_granularity" => self.gw_granularity = parse_granularity(value)?,
            "policy_path" => self.policy_path = path(),
            "track_grad_mse" => self.track_grad_mse = parse_bool(value)?,
            "spill_dir" => self.spill_dir = path(),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn backward_config(
        &self,
        tile: usize,
        rank: usize,
        gx: PathBitsSetting,
        gw: PathBitsSetting,
        granularity: GradGranularity,
    ) -> Result<BackwardConfig> {
        let hadamard = HadamardConfig::new(tile, rank, BasisOrdering::LpL1)?;
        Ok(BackwardConfig::default()
            .with_hadamard(hadamard)
            .with_gx(gx.gx_mode())
            .with_gw(gw.gw_mode())
            .with_granularity(granularity))
    }

    /// Training configuration without the policy (see [`RunConfig::run`]).
    pub fn train_config(&self) -> Result<TrainConfig> {
        let backward = self.backward_config(self.tile, self.rank, self.gx_bits, self.gw_bits, self.gw_granularity)?;
        let mut overrides = BTreeMap::new();
        for (id, s) in &self.layers {
            let c = self.backward_config(
                s.tile.unwrap_or(self.tile),
                s.rank.unwrap_or(self.rank),
                s.gx_bits.unwrap_or(self.gx_bits),
                s.gw_bits.unwrap_or(self.gw_bits),
                s.gw_granularity.unwrap_or(self.gw_granularity),
            )?;
            overrides.insert(id.clone(), c);
        }
        Ok(TrainConfig {
            mode: self.mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer,
            adam: AdamHyper {
                weight_decay: self.weight_decay,
                ..AdamHyper::default()
            },
            warmup_epochs: self.warmup_epochs,
            seed: self.seed,
            backward,
            overrides,
            spill_dir: self.spill_dir.clone(),
            track_grad_mse: self.track_grad_mse,
            ..TrainConfig::default()
        })
    }

    /// Builds the dataset; every failure is reported as a data error.
    pub fn build_dataset(&self) -> Result<Dataset> {
        let data_seed = Rng::new(self.seed).fork(2).next_u64();
        let data = match self.dataset {
            DataKind::Spirals => {
                if self.features == 0 || !self.features.is_multiple_of(2) {
                    return Err(HotError::Data(format!(
                        "features must be even and positive, got {}",
                        self.features
                    )));
                }
                let d = make_spirals(self.samples, self.noise, data_seed)?;
                let lifted = fourier_features(&d.inputs, self.features, 1.0, 0x5eed)?;
                d.map_inputs(|_| lifted)?
            }
            DataKind::Tokens => make_token_task(self.samples, self.seq_len, self.features, data_seed)?,
            DataKind::Idx => {
                let (Some(images), Some(labels)) = (&self.idx_images, &self.idx_labels) else {
                    return Err(HotError::Data("dataset = idx needs idx_images and idx_labels".into()));
                };
                load_idx(images, labels)?
            }
        };
        Ok(data)
    }

    pub fn build_model(&self, data: &Dataset) -> Result<Model> {
        let mut rng = Rng::new(self.seed).fork(1);
        let classes = data.num_classes.max(2);
        let mut model = match self.model {
            ModelKind::Mlp => Model::mlp(&[data.feature_dim(), self.hidden, classes], false, &mut rng)?,
            ModelKind::Transformer => Model::transformer(
                data.feature_dim(),
                self.hidden,
                2 * self.hidden,
                data.seq_len,
                1,
                classes,
                &mut rng,
            )?,
        };
        if self.lora_rank > 0 {
            model.add_lora(self.lora_rank, self.lora_scaling, &mut rng)?;
        }
        Ok(model)
    }

    /// Loads data and policy, builds the model and trains it. The record's
    /// `config` is this resolved configuration.
    pub fn run(&self) -> Result<TrainRecord> {
        let data = self.build_dataset().map_err(|e| match e {
            HotError::Io(io) => HotError::Data(io.to_string()),
            other => other,
        })?;
        let model_cfg = self.train_config()?;
        let mut model = self.build_model(&data)?;
        let policy = self.policy_path.as_deref().map(load_policy).transpose()?;
        let cfg = TrainConfig { policy, ..model_cfg };
        let mut record = train(&mut model, &data, &cfg)?;
        record.config = serde_json::to_value(self).map_err(|e| HotError::Format(e.to_string()))?;
        Ok(record)
    }
}
