//! Sequential models built from HOT-managed linear layers, elementwise
//! activations, a toy transformer block, and token mean-pooling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use crate::abc::{compress_activation, gw_from_compressed, read_spill, write_spill, CompressedActivation};
use crate::backward::{forward, hot_gw, hot_gx, lora_backward, BackwardConfig, GwMode, LinearLayer, LoraAdapter};
use crate::error::{HotError, Result};
use crate::linalg::{random_matrix, Distribution, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub name: String,
    pub seq_len: usize,
    pub dim: usize,
    /// Fused projection to `[q | k | v]`, `3·dim × dim`.
    pub qkv: LinearLayer,
    pub proj: LinearLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayer),
    Relu,
    Gelu,
    Block(Box<TransformerBlock>),
    /// Averages each group of `seq_len` consecutive rows.
    MeanPool { seq_len: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub layers: Vec<Layer>,
}

/// How the forward pass stores activations and which backward each linear
/// layer runs.
#[derive(Debug, Clone)]
pub struct TraceOptions {
    pub default: BackwardConfig,
    pub overrides: BTreeMap<String, BackwardConfig>,
    /// Store HLA-reduced INT8 buffers instead of dense activations where the
    /// weight-gradient path allows it.
    pub compress: bool,
    /// Write compressed buffers to disk between the passes.
    pub spill_dir: Option<PathBuf>,
    /// Keep each linear layer's `g_y` and `g_x` in the gradients.
    pub capture: bool,
}

impl TraceOptions {
    pub fn fp() -> Self {
        Self::with_config(BackwardConfig::fp(), false)
    }

    pub fn hot(cfg: BackwardConfig) -> Self {
        Self::with_config(cfg, true)
    }

    pub fn with_config(cfg: BackwardConfig, compress: bool) -> Self {
        Self {
            default: cfg,
            overrides: BTreeMap::new(),
            compress,
            spill_dir: None,
            capture: false,
        }
    }

    pub fn capture(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn config_for(&self, id: &str) -> BackwardConfig {
        self.overrides.get(id).copied().unwrap_or(self.default)
    }
}

#[derive(Debug)]
enum Stored {
    Dense(Matrix),
    Compressed(CompressedActivation),
    Spilled(PathBuf),
}

#[derive(Debug)]
struct LinearCache {
    stored: Stored,
    cfg: BackwardConfig,
}

#[derive(Debug)]
struct BlockCache {
    qkv: LinearCache,
    qkv_out: Matrix,
    probs: Vec<Matrix>,
    proj: LinearCache,
    fc1: LinearCache,
    pre_gelu: Matrix,
    fc2: LinearCache,
}

#[derive(Debug)]
enum LayerTrace {
    Linear(LinearCache),
    Relu(Matrix),
    Gelu(Matrix),
    Block(Box<BlockCache>),
    MeanPool,
}

#[derive(Debug)]
pub struct Trace {
    layers: Vec<LayerTrace>,
    output: Matrix,
    capture: bool,
    spilled: Vec<PathBuf>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

impl Drop for Trace {
    fn drop(&mut self) {
        for path in &self.spilled {
            let _ = std::fs::remove_file(path);
        }
    }
}

/// Gradients of one linear layer. Frozen (LoRA) layers carry no `gw`/`gbias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub id: String,
    pub gw: Option<Matrix>,
    pub gbias: Option<Vec<f32>>,
    pub lora_a: Option<Matrix>,
    pub lora_b: Option<Matrix>,
    pub gy: Option<Matrix>,
    pub gx: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    /// In forward order of the linear layers.
    pub linear: Vec<LinearGrads>,
    pub input: Matrix,
}

impl ModelGrads {
    /// Gradients keyed like [`Model::params_mut`].
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        for g in &self.linear {
            if let Some(gw) = &g.gw {
                out.insert(format!("{}.weight", g.id), gw.data().to_vec());
            }
            if let Some(gb) = &g.gbias {
                out.insert(format!("{}.bias", g.id), gb.clone());
            }
            if let Some(ga) = &g.lora_a {
                out.insert(format!("{}.lora_a", g.id), ga.data().to_vec());
            }
            if let Some(gb) = &g.lora_b {
                out.insert(format!("{}.lora_b", g.id), gb.data().to_vec());
            }
        }
        out
    }

    pub fn get(&self, id: &str) -> Option<&LinearGrads> {
        self.linear.iter().find(|g| g.id == id)
    }
}

fn he_normal(rng: &mut Rng, out: usize, inp: usize, gain: f64) -> Result<Matrix> {
    let std = gain / (inp as f64).sqrt();
    random_matrix(rng, out, inp, Distribution::Normal { mean: 0.0, std })
}

fn ensure_finite(m: &Matrix, stage: &str, layer: &str) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(HotError::NonFinite {
            stage: stage.to_string(),
            layer: layer.to_string(),
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn gelu_grad(x: f32) -> f64 {
    let x = x as f64;
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn mean_pool(x: &Matrix, seq_len: usize) -> Result<Matrix> {
    if seq_len == 0 || !x.rows().is_multiple_of(seq_len) {
        return Err(HotError::invalid(format!(
            "mean pool over {seq_len} tokens cannot split {} rows",
            x.rows()
        )));
    }
    let groups = x.rows() / seq_len;
    let mut out = Matrix::zeros(groups, x.cols());
    for g in 0..groups {
        let mut acc = vec![0f64; x.cols()];
        for t in 0..seq_len {
            for (a, &v) in acc.iter_mut().zip(x.row(g * seq_len + t)) {
                *a += v as f64;
            }
        }
        for (o, a) in out.row_mut(g).iter_mut().zip(acc) {
            *o = (a / seq_len as f64) as f32;
        }
    }
    Ok(out)
}

fn softmax_rows(s: &mut Matrix) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            *v = e as f32;
            sum += e;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
}

/// Columns `[start, start + width)` of every row in `rows`.
fn sub_block(m: &Matrix, rows: std::ops::Range<usize>, start: usize, width: usize) -> Matrix {
    Matrix::from_fn(rows.len(), width, |i, j| m.get(rows.start + i, start + j))
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, hidden: usize, seq_len: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 || seq_len == 0 {
            return Err(HotError::invalid("transformer block dimensions must be positive"));
        }
        let lin = |rng: &mut Rng, id: &str, out: usize, inp: usize| -> Result<LinearLayer> {
            LinearLayer::new(format!("{name}.{id}"), he_normal(rng, out, inp, 1.0)?).with_bias(vec![0.0; out])
        };
        Ok(Self {
            name: name.to_string(),
            seq_len,
            dim,
            qkv: lin(rng, "qkv", 3 * dim, dim)?,
            proj: lin(rng, "proj", dim, dim)?,
            fc1: lin(rng, "fc1", hidden, dim)?,
            fc2: lin(rng, "fc2", dim, hidden)?,
        })
    }

    fn linears(&self) -> [&LinearLayer; 4] {
        [&self.qkv, &self.proj, &self.fc1, &self.fc2]
    }

    fn linears_mut(&mut self) -> [&mut LinearLayer; 4] {
        [&mut self.qkv, &mut self.proj, &mut self.fc1, &mut self.fc2]
    }

    fn attention(&self, qkv: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let (t, d) = (self.seq_len, self.dim);
        if !qkv.rows().is_multiple_of(t) {
            return Err(HotError::invalid(format!(
                "block {}: {} rows are not a multiple of seq_len {t}",
                self.name,
                qkv.rows()
            )));
        }
        let scale = 1.0 / (d as f32).sqrt();
        let mut out = Matrix::zeros(qkv.rows(), d);
        let mut probs = Vec::with_capacity(qkv.rows() / t);
        for b in 0..qkv.rows() / t {
            let rows = b * t..(b + 1) * t;
            let q = sub_block(qkv, rows.clone(), 0, d);
            let k = sub_block(qkv, rows.clone(), d, d);
            let v = sub_block(qkv, rows.clone(), 2 * d, d);
            let mut s = q.matmul_transposed(&k)?.scale(scale);
            softmax_rows(&mut s);
            let a = s.matmul(&v)?;
            for i in 0..t {
                out.row_mut(b * t + i).copy_from_slice(a.row(i));
            }
            probs.push(s);
        }
        Ok((out, probs))
    }

    fn attention_backward(&self, qkv: &Matrix, probs: &[Matrix], g_out: &Matrix) -> Result<Matrix> {
        let (t, d) = (self.seq_len, self.dim);
        let scale = 1.0 / (d as f32).sqrt();
        let mut g_qkv = Matrix::zeros(qkv.rows(), 3 * d);
        for (b, p) in probs.iter().enumerate() {
            let rows = b * t..(b + 1) * t;
            let q = sub_block(qkv, rows.clone(), 0, d);
            let k = sub_block(qkv, rows.clone(), d, d);
            let v = sub_block(qkv, rows.clone(), 2 * d, d);
            let g_a = sub_block(g_out, rows.clone(), 0, d);
            let g_p = g_a.matmul_transposed(&v)?;
            let g_v = p.transpose().matmul(&g_a)?;
            let mut g_s = Matrix::zeros(t, t);
            for i in 0..t {
                let dot: f64 = p.row(i).iter().zip(g_p.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum();
                for j in 0..t {
                    g_s.set(i, j, (p.get(i, j) as f64 * (g_p.get(i, j) as f64 - dot)) as f32);
                }
            }
            let g_q = g_s.matmul(&k)?.scale(scale);
            let g_k = g_s.transpose().matmul(&q)?.scale(scale);
            for i in 0..t {
                let row = g_qkv.row_mut(b * t + i);
                row[..d].copy_from_slice(g_q.row(i));
                row[d..2 * d].copy_from_slice(g_k.row(i));
                row[2 * d..].copy_from_slice(g_v.row(i));
            }
        }
        Ok(g_qkv)
    }
}

struct ForwardCtx<'a> {
    opts: &'a TraceOptions,
    spilled: Vec<PathBuf>,
}

impl ForwardCtx<'_> {
    fn linear(&mut self, layer: &LinearLayer, x: &Matrix) -> Result<(Matrix, LinearCache)> {
        let y = forward(layer, x)?;
        ensure_finite(&y, "forward", &layer.id)?;
        let cfg = self.opts.config_for(&layer.id);
        let compressible = self.opts.compress && layer.lora.is_none() && matches!(cfg.gw_mode, GwMode::Hla(_));
        let stored = if compressible {
            let cact = compress_activation(&layer.id, x, &cfg)?;
            match &self.opts.spill_dir {
                Some(dir) => {
                    let path = dir.join(format!("{:04}-{}.hota", self.spilled.len(), layer.id));
                    let mut w = BufWriter::new(File::create(&path)?);
                    write_spill(&cact, &mut w)?;
                    std::io::Write::flush(&mut w)?;
                    self.spilled.push(path.clone());
                    Stored::Spilled(path)
                }
                None => Stored::Compressed(cact),
            }
        } else {
            Stored::Dense(x.clone())
        };
        Ok((y, LinearCache { stored, cfg }))
    }
}

fn linear_backward(layer: &LinearLayer, cache: &LinearCache, gy: &Matrix, capture: bool) -> Result<(Matrix, LinearGrads)> {
    let cfg = &cache.cfg;
    let id = &layer.id;
    let mut grads = LinearGrads {
        id: id.clone(),
        gw: None,
        gbias: None,
        lora_a: None,
        lora_b: None,
        gy: capture.then(|| gy.clone()),
        gx: None,
    };
    let gx = if layer.lora.is_some() {
        let x = match &cache.stored {
            Stored::Dense(x) => x,
            _ => return Err(HotError::invalid(format!("LoRA layer {id} needs its dense activation"))),
        };
        let lg = lora_backward(layer, gy, x, cfg)?;
        ensure_finite(&lg.ga, "backward", id)?;
        ensure_finite(&lg.gb, "backward", id)?;
        grads.lora_a = Some(lg.ga);
        grads.lora_b = Some(lg.gb);
        lg.gx
    } else {
        let gw = match &cache.stored {
            Stored::Dense(x) => hot_gw(gy, x, cfg)?,
            Stored::Compressed(c) => {
                c.check_layer(id)?;
                gw_from_compressed(gy, c, cfg)?
            }
            Stored::Spilled(path) => {
                let c = read_spill(&mut BufReader::new(File::open(path)?))?;
                c.check_layer(id)?;
                gw_from_compressed(gy, &c, cfg)?
            }
        };
        ensure_finite(&gw, "backward", id)?;
        grads.gw = Some(gw);
        if layer.bias.is_some() {
            grads.gbias = Some(gy.column_sums());
        }
        hot_gx(gy, &layer.weight, cfg)?
    };
    ensure_finite(&gx, "backward", id)?;
    if capture {
        grads.gx = Some(gx.clone());
    }
    Ok((gx, grads))
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let model = Self { layers };
        model.validate()?;
        Ok(model)
    }

    /// MLP with ReLU or GELU between linear layers `fc0, fc1, …`.
    pub fn mlp(sizes: &[usize], gelu_act: bool, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(HotError::invalid("an MLP needs at least input and output sizes"));
        }
        let mut layers = Vec::new();
        for (k, pair) in sizes.windows(2).enumerate() {
            let w = he_normal(rng, pair[1], pair[0], std::f64::consts::SQRT_2)?;
            layers.push(Layer::Linear(LinearLayer::new(format!("fc{k}"), w).with_bias(vec![0.0; pair[1]])?));
            if k + 2 < sizes.len() {
                layers.push(if gelu_act { Layer::Gelu } else { Layer::Relu });
            }
        }
        Self::new(layers)
    }

    /// `depth` bias-free `width × width` linear layers `l0, l1, …` with ReLU
    /// between them.
    pub fn chain(width: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0..depth {
            let w = he_normal(rng, width, width, std::f64::consts::SQRT_2)?;
            layers.push(Layer::Linear(LinearLayer::new(format!("l{k}"), w)));
            if k + 1 < depth {
                layers.push(Layer::Relu);
            }
        }
        Self::new(layers)
    }

    /// Input projection, `blocks` transformer blocks, mean pooling over
    /// tokens, and a linear classification head.
    pub fn transformer(
        input_dim: usize,
        dim: usize,
        hidden: usize,
        seq_len: usize,
        blocks: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layers = vec![Layer::Linear(
            LinearLayer::new("embed", he_normal(rng, dim, input_dim, 1.0)?).with_bias(vec![0.0; dim])?,
        )];
        for b in 0..blocks {
            layers.push(Layer::Block(Box::new(TransformerBlock::new(&format!("block{b}"), dim, hidden, seq_len, rng)?)));
        }
        layers.push(Layer::MeanPool { seq_len });
        layers.push(Layer::Linear(
            LinearLayer::new("head", he_normal(rng, classes, dim, 1.0)?).with_bias(vec![0.0; classes])?,
        ));
        Self::new(layers)
    }

    /// Freezes every linear layer and attaches a LoRA adapter (`A` zero, `B`
    /// random) so that the initial function is unchanged.
    pub fn add_lora(&mut self, rank: usize, scaling: f32, rng: &mut Rng) -> Result<()> {
        for layer in self.linear_layers_mut() {
            let (o, i) = (layer.out_features(), layer.in_features());
            let lora = LoraAdapter {
                a: Matrix::zeros(o, rank),
                b: he_normal(rng, rank, i, 1.0)?,
                scaling,
            };
            *layer = layer.clone().with_lora(lora)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        let mut ids = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    if let Some(w) = width {
                        if w != l.in_features() {
                            return Err(HotError::invalid(format!(
                                "layer {} expects {} inputs but receives {w}",
                                l.id,
                                l.in_features()
                            )));
                        }
                    }
                    width = Some(l.out_features());
                }
                Layer::Block(b) => {
                    if let Some(w) = width {
                        if w != b.dim {
                            return Err(HotError::invalid(format!(
                                "block {} expects width {} but receives {w}",
                                b.name, b.dim
                            )));
                        }
                    }
                    let shapes = [
                        (&b.qkv, 3 * b.dim, b.dim),
                        (&b.proj, b.dim, b.dim),
                        (&b.fc1, b.fc1.out_features(), b.dim),
                        (&b.fc2, b.dim, b.fc1.out_features()),
                    ];
                    for (l, o, i) in shapes {
                        if l.out_features() != o || l.in_features() != i {
                            return Err(HotError::invalid(format!("block {} has a misshaped {}", b.name, l.id)));
                        }
                    }
                    width = Some(b.dim);
                }
                Layer::Relu | Layer::Gelu | Layer::MeanPool { .. } => {}
            }
        }
        for l in self.linear_layers() {
            if ids.contains(&l.id.as_str()) {
                return Err(HotError::invalid(format!("duplicate layer id {}", l.id)));
            }
            ids.push(l.id.as_str());
        }
        Ok(())
    }

    pub fn linear_layers(&self) -> Vec<&LinearLayer> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => out.push(l),
                Layer::Block(b) => out.extend(b.linears()),
                _ => {}
            }
        }
        out
    }

    pub fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => out.push(l),
                Layer::Block(b) => out.extend(b.linears_mut()),
                _ => {}
            }
        }
        out
    }

    pub fn linear_ids(&self) -> Vec<String> {
        self.linear_layers().iter().map(|l| l.id.clone()).collect()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Linear(l) => Some(l.in_features()),
            Layer::Block(b) => Some(b.dim),
            _ => None,
        })
    }

    /// Token count each sample contributes to the first layer (1 without a
    /// transformer block).
    pub fn seq_len(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Block(b) => Some(b.seq_len),
                Layer::MeanPool { seq_len } => Some(*seq_len),
                _ => None,
            })
            .unwrap_or(1)
    }

    /// Trainable parameters in a fixed order. Base weights and biases of
    /// layers with a LoRA adapter are frozen and omitted.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out = Vec::new();
        for l in self.linear_layers_mut() {
            let id = l.id.clone();
            match &mut l.lora {
                Some(lora) => {
                    out.push((format!("{id}.lora_a"), lora.a.data_mut()));
                    out.push((format!("{id}.lora_b"), lora.b.data_mut()));
                }
                None => {
                    out.push((format!("{id}.weight"), l.weight.data_mut()));
                    if let Some(b) = &mut l.bias {
                        out.push((format!("{id}.bias"), b.as_mut_slice()));
                    }
                }
            }
        }
        out
    }

    /// Plain FP forward without storing anything.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(l) => forward(l, &h)?,
                Layer::Relu => h.map(|v| v.max(0.0)),
                Layer::Gelu => h.map(gelu),
                Layer::MeanPool { seq_len } => mean_pool(&h, *seq_len)?,
                Layer::Block(b) => {
                    let qkv = forward(&b.qkv, &h)?;
                    let (a, _) = b.attention(&qkv)?;
                    let hh = h.add(&forward(&b.proj, &a)?)?;
                    let f = forward(&b.fc1, &hh)?.map(gelu);
                    hh.add(&forward(&b.fc2, &f)?)?
                }
            };
        }
        Ok(h)
    }

    /// FP forward that stores what the backward pass needs.
    pub fn forward_trace(&self, x: &Matrix, opts: &TraceOptions) -> Result<Trace> {
        let mut ctx = ForwardCtx { opts, spilled: Vec::new() };
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let result = (|| -> Result<Matrix> {
            for layer in &self.layers {
                h = match layer {
                    Layer::Linear(l) => {
                        let (y, cache) = ctx.linear(l, &h)?;
                        traces.push(LayerTrace::Linear(cache));
                        y
                    }
                    Layer::Relu => {
                        let y = h.map(|v| v.max(0.0));
                        traces.push(LayerTrace::Relu(std::mem::replace(&mut h, Matrix::zeros(0, 0))));
                        y
                    }
                    Layer::Gelu => {
                        let y = h.map(gelu);
                        traces.push(LayerTrace::Gelu(std::mem::replace(&mut h, Matrix::zeros(0, 0))));
                        y
                    }
                    Layer::MeanPool { seq_len } => {
                        traces.push(LayerTrace::MeanPool);
                        mean_pool(&h, *seq_len)?
                    }
                    Layer::Block(b) => {
                        let (qkv_out, qkv) = ctx.linear(&b.qkv, &h)?;
                        let (a, probs) = b.attention(&qkv_out)?;
                        ensure_finite(&a, "forward", &format!("{}.attention", b.name))?;
                        let (p, proj) = ctx.linear(&b.proj, &a)?;
                        let hh = h.add(&p)?;
                        let (pre_gelu, fc1) = ctx.linear(&b.fc1, &hh)?;
                        let f = pre_gelu.map(gelu);
                        let (o, fc2) = ctx.linear(&b.fc2, &f)?;
                        traces.push(LayerTrace::Block(Box::new(BlockCache {
                            qkv,
                            qkv_out,
                            probs,
                            proj,
                            fc1,
                            pre_gelu,
                            fc2,
                        })));
                        hh.add(&o)?
                    }
                };
            }
            Ok(h)
        })();
        let mut trace = Trace {
            layers: traces,
            output: Matrix::zeros(0, 0),
            capture: opts.capture,
            spilled: ctx.spilled,
        };
        trace.output = result?;
        Ok(trace)
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the output)
    /// through the stored trace.
    pub fn backward(&self, trace: &Trace, grad_out: &Matrix) -> Result<ModelGrads> {
        if grad_out.shape() != trace.output.shape() {
            return Err(HotError::Shape {
                op: "Model::backward",
                left: grad_out.shape(),
                right: trace.output.shape(),
            });
        }
        if trace.layers.len() != self.layers.len() {
            return Err(HotError::invalid("trace does not belong to this model"));
        }
        let capture = trace.capture;
        let mut g = grad_out.clone();
        let mut linear_rev: Vec<LinearGrads> = Vec::new();
        for (layer, lt) in self.layers.iter().zip(&trace.layers).rev() {
            g = match (layer, lt) {
                (Layer::Linear(l), LayerTrace::Linear(cache)) => {
                    let (gx, grads) = linear_backward(l, cache, &g, capture)?;
                    linear_rev.push(grads);
                    gx
                }
                (Layer::Relu, LayerTrace::Relu(x)) => {
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| if x.get(i, j) > 0.0 { g.get(i, j) } else { 0.0 })
                }
                (Layer::Gelu, LayerTrace::Gelu(x)) => Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    (g.get(i, j) as f64 * gelu_grad(x.get(i, j))) as f32
                }),
                (Layer::MeanPool { seq_len }, LayerTrace::MeanPool) => {
                    let inv = 1.0 / *seq_len as f32;
                    Matrix::from_fn(g.rows() * seq_len, g.cols(), |i, j| g.get(i / seq_len, j) * inv)
                }
                (Layer::Block(b), LayerTrace::Block(c)) => {
                    let (g_f, fc2) = linear_backward(&b.fc2, &c.fc2, &g, capture)?;
                    let g_pre = Matrix::from_fn(g_f.rows(), g_f.cols(), |i, j| {
                        (g_f.get(i, j) as f64 * gelu_grad(c.pre_gelu.get(i, j))) as f32
                    });
                    let (g_hh_mlp, fc1) = linear_backward(&b.fc1, &c.fc1, &g_pre, capture)?;
                    let g_hh = g.add(&g_hh_mlp)?;
                    let (g_a, proj) = linear_backward(&b.proj, &c.proj, &g_hh, capture)?;
                    let g_qkv = b.attention_backward(&c.qkv_out, &c.probs, &g_a)?;
                    ensure_finite(&g_qkv, "backward", &format!("{}.attention", b.name))?;
                    let (g_x, qkv) = linear_backward(&b.qkv, &c.qkv, &g_qkv, capture)?;
                    linear_rev.extend([fc2, fc1, proj, qkv]);
                    g_hh.add(&g_x)?
                }
                _ => return Err(HotError::invalid("trace does not belong to this model")),
            };
        }
        linear_rev.reverse();
        Ok(ModelGrads {
            linear: linear_rev,
            input: g,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::loss::softmax_cross_entropy;

    fn loss_of(model: &Model, x: &Matrix, labels: &[usize]) -> f64 {
        softmax_cross_entropy(&model.predict(x).unwrap(), labels).unwrap().0
    }

    fn check_grads(model: &mut Model, x: &Matrix, labels: &[usize], tol: f64) {
        let trace = model.forward_trace(x, &TraceOptions::fp()).unwrap();
        let (_, grad) = softmax_cross_entropy(trace.output(), labels).unwrap();
        let grads = model.backward(&trace, &grad).unwrap().param_grads();
        let h = 1e-2f32;
        let keys: Vec<String> = model.params_mut().into_iter().map(|(k, _)| k).collect();
        for key in keys {
            let g = &grads[&key];
            for idx in [0, g.len() / 2, g.len() - 1] {
                let set = |m: &mut Model, delta: f32| {
                    for (k, p) in m.params_mut() {
                        if k == key {
                            p[idx] += delta;
                        }
                    }
                };
                set(model, h);
                let lp = loss_of(model, x, labels);
                set(model, -2.0 * h);
                let lm = loss_of(model, x, labels);
                set(model, h);
                let numeric = (lp - lm) / (2.0 * h as f64);
                let err = (numeric - g[idx] as f64).abs();
                assert!(err < tol * (1.0 + numeric.abs()), "{key}[{idx}]: numeric {numeric} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let mut model = Model::mlp(&[6, 16, 3], true, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 6, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap();
        check_grads(&mut model, &x, &[0, 1, 2, 1, 0], 2e-2);
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let mut model = Model::transformer(4, 8, 16, 3, 1, 2, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 6, 4, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap();
        check_grads(&mut model, &x, &[0, 1], 2e-2);
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        let mut model = Model::mlp(&[6, 16, 3], true, &mut rng).unwrap();
        model.add_lora(2, 1.0, &mut rng).unwrap();
        for l in model.linear_layers_mut() {
            let lora = l.lora.as_mut().unwrap();
            lora.a = random_matrix(&mut rng, lora.a.rows(), lora.a.cols(), Distribution::Normal { mean: 0.0, std: 0.5 })
                .unwrap();
        }
        let x = random_matrix(&mut rng, 4, 6, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let keys: Vec<String> = model.params_mut().into_iter().map(|(k, _)| k).collect();
        assert!(keys.iter().all(|k| k.contains("lora")));
        check_grads(&mut model, &x, &[0, 1, 2, 1], 2e-2);
    }

    #[test]
    fn predict_matches_trace_output() {
        let mut rng = Rng::new(8);
        let model = Model::transformer(4, 16, 32, 4, 2, 3, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 8, 4, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let trace = model.forward_trace(&x, &TraceOptions::hot(BackwardConfig::default())).unwrap();
        assert_eq!(trace.output(), &model.predict(&x).unwrap());
        assert_eq!(model.seq_len(), 4);
        assert_eq!(model.linear_ids().len(), 10);
    }

    #[test]
    fn compressed_and_spilled_traces_agree() {
        let mut rng = Rng::new(9);
        let model = Model::mlp(&[32, 64, 64, 16], false, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 48, 32, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let gy = random_matrix(&mut rng, 48, 16, Distribution::Normal { mean: 0.0, std: 1.0 }).unwrap();
        let cfg = BackwardConfig::default();
        let dense = TraceOptions::with_config(cfg, false);
        let compressed = TraceOptions::hot(cfg);
        let dir = tempfile::tempdir().unwrap();
        let mut spill = TraceOptions::hot(cfg);
        spill.spill_dir = Some(dir.path().to_path_buf());
        let run = |o: &TraceOptions| {
            let t = model.forward_trace(&x, o).unwrap();
            model.backward(&t, &gy).unwrap()
        };
        let a = run(&dense);
        assert_eq!(a, run(&compressed));
        assert_eq!(a, run(&spill));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn validation_rejects_broken_chains() {
        let a = LinearLayer::new("a", Matrix::zeros(8, 4));
        let b = LinearLayer::new("b", Matrix::zeros(2, 7));
        assert!(Model::new(vec![Layer::Linear(a.clone()), Layer::Linear(b)]).is_err());
        assert!(Model::new(vec![Layer::Linear(a.clone()), Layer::Relu, Layer::Linear(a)]).is_err());
    }

    #[test]
    fn nan_reports_layer() {
        let mut rng = Rng::new(10);
        let mut model = Model::mlp(&[4, 16, 2], false, &mut rng).unwrap();
        model.linear_layers_mut()[1].weight.set(0, 0, f32::NAN);
        let x = Matrix::from_fn(3, 4, |_, _| 1.0);
        let err = model.forward_trace(&x, &TraceOptions::fp()).unwrap_err();
        assert!(err.to_string().contains("fc1"), "{err}");
    }
}
