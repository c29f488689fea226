//! Single-hidden-layer classifier over hashed features.
//!
//! The model is `logits = head(h + adapter(h))` with `h = relu(W1 x + b1)`.
//! `W1`/`b1` form the backbone, generated once from the global seed and shared
//! by every shard. Which blocks SGD may touch depends on [`HeadMode`]:
//!
//! | mode      | trainable (and checkpointed)  |
//! |-----------|-------------------------------|
//! | `Full`    | backbone, head                |
//! | `FcOnly`  | head                          |
//! | `Adapter` | adapter (down + up), head     |
//!
//! Parameters are stored as `f32`. The forward and backward passes run in
//! `f64` with a fixed accumulation order, so a training run is a pure function
//! of its inputs down to the last bit.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::data::FeatureVector;
use crate::seed::SeedKey;
use crate::store::CHECKPOINT_OVERHEAD_BYTES;

/// Adapter trainable parameters may be at most this fraction of `Full`.
pub const MAX_ADAPTER_RATIO: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("invalid model dims: {0}")]
    Dims(String),
    #[error("adapter bottleneck {bottleneck} gives {ratio:.4} of full-mode parameters (limit {MAX_ADAPTER_RATIO})")]
    AdapterTooLarge { bottleneck: usize, ratio: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training data")]
    EmptyData,
    #[error("feature dimension {got} does not match model input dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("payload has {got} values, mode expects {expected}")]
    PayloadLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadMode {
    Full,
    FcOnly,
    Adapter { bottleneck: usize },
}

impl HeadMode {
    /// On-disk mode byte.
    pub fn code(self) -> u8 {
        match self {
            HeadMode::Full => 0,
            HeadMode::FcOnly => 1,
            HeadMode::Adapter { .. } => 2,
        }
    }

    pub fn from_code(code: u8, bottleneck: usize) -> Option<Self> {
        match code {
            0 => Some(HeadMode::Full),
            1 => Some(HeadMode::FcOnly),
            2 if bottleneck >= 1 => Some(HeadMode::Adapter { bottleneck }),
            _ => None,
        }
    }

    pub fn bottleneck(self) -> usize {
        match self {
            HeadMode::Adapter { bottleneck } => bottleneck,
            _ => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::Full => "full",
            HeadMode::FcOnly => "fc",
            HeadMode::Adapter { .. } => "adapter",
        }
    }

    /// Whether the backbone is frozen (hidden activations can be cached).
    pub fn frozen_backbone(self) -> bool {
        !matches!(self, HeadMode::Full)
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadMode::Adapter { bottleneck } => write!(f, "adapter:{bottleneck}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for HeadMode {
    type Err = String;

    /// `full`, `fc`, `adapter` (bottleneck 16) or `adapter:<k>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(HeadMode::Full),
            "fc" | "fc-only" | "fconly" => Ok(HeadMode::FcOnly),
            "adapter" => Ok(HeadMode::Adapter { bottleneck: 16 }),
            other => match other.strip_prefix("adapter:").map(str::parse::<usize>) {
                Some(Ok(b)) if b >= 1 => Ok(HeadMode::Adapter { bottleneck: b }),
                _ => Err(format!("unknown mode `{other}` (expected full, fc, adapter or adapter:<k>)")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn new(input_dim: usize, hidden: usize, num_classes: usize) -> Result<Self, LearnerError> {
        let d = ModelDims { input_dim, hidden, num_classes };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.input_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(LearnerError::Dims(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Trainable parameter count for `mode`.
pub fn trainable_count(dims: ModelDims, mode: HeadMode) -> usize {
    let head = dims.num_classes * dims.hidden + dims.num_classes;
    match mode {
        HeadMode::Full => dims.hidden * dims.input_dim + dims.hidden + head,
        HeadMode::FcOnly => head,
        HeadMode::Adapter { bottleneck } => 2 * bottleneck * dims.hidden + bottleneck + dims.hidden + head,
    }
}

/// Check dims and, for adapters, the parameter budget.
pub fn validate_mode(dims: ModelDims, mode: HeadMode) -> Result<(), LearnerError> {
    dims.validate()?;
    if let HeadMode::Adapter { bottleneck } = mode {
        if bottleneck == 0 {
            return Err(LearnerError::Dims("adapter bottleneck must be >= 1".into()));
        }
        let ratio = trainable_count(dims, mode) as f64 / trainable_count(dims, HeadMode::Full) as f64;
        if ratio > MAX_ADAPTER_RATIO {
            return Err(LearnerError::AdapterTooLarge { bottleneck, ratio });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub trainable_count: u64,
    pub checkpoint_bytes: u64,
}

/// Trainable parameters and exact checkpoint file size for `(dims, mode)`.
pub fn param_footprint(dims: ModelDims, mode: HeadMode) -> Footprint {
    let n = trainable_count(dims, mode) as u64;
    Footprint { trainable_count: n, checkpoint_bytes: 4 * n + CHECKPOINT_OVERHEAD_BYTES }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub global_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 5e-3, batch_size: 16, epochs: 10, global_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnerError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(LearnerError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(LearnerError::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// `epochs * ceil(n / batch_size)`.
    pub fn steps_for(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }
}

/// First layer. Weights are stored input-major: the `hidden` weights fed by
/// input feature `j` are contiguous at `weights[j * hidden..(j + 1) * hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub input_dim: usize,
    pub hidden: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Backbone {
    /// Uniform(-1/sqrt(input_dim), 1/sqrt(input_dim)) from stream `(seed, "backbone")`.
    pub fn generate(dims: ModelDims, global_seed: u64) -> Self {
        let bound = 1.0 / (dims.input_dim as f64).sqrt();
        let mut rng = SeedKey::new(global_seed).tag("backbone").rng();
        let weights = (0..dims.input_dim * dims.hidden).map(|_| rng.uniform_f32(-bound, bound)).collect();
        let bias = (0..dims.hidden).map(|_| rng.uniform_f32(-bound, bound)).collect();
        Backbone { input_dim: dims.input_dim, hidden: dims.hidden, weights, bias }
    }

    fn pre_activation(&self, x: &FeatureVector, z: &mut [f64]) {
        for (zi, &b) in z.iter_mut().zip(&self.bias) {
            *zi = b as f64;
        }
        for (j, v) in x.iter() {
            let col = &self.weights[j * self.hidden..(j + 1) * self.hidden];
            let v = v as f64;
            for (zi, &w) in z.iter_mut().zip(col) {
                *zi += v * w as f64;
            }
        }
    }

    /// `relu(W1 x + b1)`.
    pub fn hidden_activations(&self, x: &FeatureVector) -> Vec<f64> {
        let mut z = vec![0.0; self.hidden];
        self.pre_activation(x, &mut z);
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        z
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.weights.len() + self.bias.len()));
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Residual bottleneck: `a = h + up * relu(down * h + down_b) + up_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub bottleneck: usize,
    pub hidden: usize,
    /// bottleneck x hidden, row-major
    pub down_w: Vec<f32>,
    pub down_b: Vec<f32>,
    /// hidden x bottleneck, row-major
    pub up_w: Vec<f32>,
    pub up_b: Vec<f32>,
}

/// num_classes x hidden, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub num_classes: usize,
    pub hidden: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub mode: HeadMode,
    pub backbone: Arc<Backbone>,
    pub adapter: Option<Adapter>,
    pub head: Head,
}

/// Fresh parameters for one shard, generating the backbone as well.
pub fn init_params(dims: ModelDims, mode: HeadMode, global_seed: u64, shard: u32) -> Result<ModelParams, LearnerError> {
    validate_mode(dims, mode)?;
    let backbone = Arc::new(Backbone::generate(dims, global_seed));
    ModelParams::init_with_backbone(backbone, dims, mode, global_seed, shard)
}

fn uniform_block(key: &SeedKey, name: &str, len: usize, bound: f64) -> Vec<f32> {
    let mut rng = key.child_tag(name).rng();
    (0..len).map(|_| rng.uniform_f32(-bound, bound)).collect()
}

impl ModelParams {
    /// Trainable blocks from stream `(seed, "init", shard)`; each block draws
    /// from its own named child stream with bound `1/sqrt(fan_in)`.
    pub fn init_with_backbone(
        backbone: Arc<Backbone>,
        dims: ModelDims,
        mode: HeadMode,
        global_seed: u64,
        shard: u32,
    ) -> Result<Self, LearnerError> {
        validate_mode(dims, mode)?;
        if backbone.input_dim != dims.input_dim || backbone.hidden != dims.hidden {
            return Err(LearnerError::Dims("backbone does not match dims".into()));
        }
        let key = SeedKey::new(global_seed).tag("init").with(shard as u64);
        let hb = 1.0 / (dims.hidden as f64).sqrt();
        let head = Head {
            num_classes: dims.num_classes,
            hidden: dims.hidden,
            weights: uniform_block(&key, "head.w", dims.num_classes * dims.hidden, hb),
            bias: uniform_block(&key, "head.b", dims.num_classes, hb),
        };
        let adapter = match mode {
            HeadMode::Adapter { bottleneck } => {
                let bb = 1.0 / (bottleneck as f64).sqrt();
                Some(Adapter {
                    bottleneck,
                    hidden: dims.hidden,
                    down_w: uniform_block(&key, "adapter.down.w", bottleneck * dims.hidden, hb),
                    down_b: uniform_block(&key, "adapter.down.b", bottleneck, hb),
                    up_w: uniform_block(&key, "adapter.up.w", dims.hidden * bottleneck, bb),
                    up_b: uniform_block(&key, "adapter.up.b", dims.hidden, bb),
                })
            }
            _ => None,
        };
        Ok(ModelParams { dims, mode, backbone, adapter, head })
    }

    pub fn trainable_count(&self) -> usize {
        trainable_count(self.dims, self.mode)
    }

    fn trainable_blocks(&self) -> Vec<&[f32]> {
        let mut blocks: Vec<&[f32]> = Vec::with_capacity(6);
        if self.mode == HeadMode::Full {
            blocks.push(&self.backbone.weights);
            blocks.push(&self.backbone.bias);
        }
        if let Some(a) = &self.adapter {
            blocks.extend([&a.down_w[..], &a.down_b, &a.up_w, &a.up_b]);
        }
        blocks.push(&self.head.weights);
        blocks.push(&self.head.bias);
        blocks
    }

    /// Trainable parameters flattened in checkpoint order:
    /// `Full`: W1 (input-major), b1, head W, head b.
    /// `FcOnly`: head W, head b.
    /// `Adapter`: down W, down b, up W, up b, head W, head b.
    pub fn trainable_payload(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for b in self.trainable_blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrite trainable blocks from a payload in [`Self::trainable_payload`] order.
    pub fn load_trainable(&mut self, payload: &[f32]) -> Result<(), LearnerError> {
        let expected = self.trainable_count();
        if payload.len() != expected {
            return Err(LearnerError::PayloadLength { expected, got: payload.len() });
        }
        let mut rest = payload;
        let mut take = |dst: &mut [f32]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        if self.mode == HeadMode::Full {
            let bb = Arc::make_mut(&mut self.backbone);
            take(&mut bb.weights);
            take(&mut bb.bias);
        }
        if let Some(a) = &mut self.adapter {
            take(&mut a.down_w);
            take(&mut a.down_b);
            take(&mut a.up_w);
            take(&mut a.up_b);
        }
        take(&mut self.head.weights);
        take(&mut self.head.bias);
        Ok(())
    }

    fn check_input(&self, x: &FeatureVector) -> Result<(), LearnerError> {
        if x.dim != self.dims.input_dim {
            return Err(LearnerError::DimMismatch { expected: self.dims.input_dim, got: x.dim });
        }
        Ok(())
    }

    /// Logits given precomputed hidden activations `h`.
    pub fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::new(self.dims, self.mode);
        self.forward_from_hidden(h, &mut ws);
        ws.logits
    }

    fn forward_from_hidden(&self, h: &[f64], ws: &mut Workspace) {
        let hidden = self.dims.hidden;
        match &self.adapter {
            Some(a) => {
                for k in 0..a.bottleneck {
                    let row = &a.down_w[k * hidden..(k + 1) * hidden];
                    let mut s = a.down_b[k] as f64;
                    for (&w, &hv) in row.iter().zip(h) {
                        s += w as f64 * hv;
                    }
                    ws.u[k] = s;
                    ws.q[k] = s.max(0.0);
                }
                for i in 0..hidden {
                    let row = &a.up_w[i * a.bottleneck..(i + 1) * a.bottleneck];
                    let mut s = h[i] + a.up_b[i] as f64;
                    for (&w, &qv) in row.iter().zip(&ws.q) {
                        s += w as f64 * qv;
                    }
                    ws.a[i] = s;
                }
            }
            None => ws.a.copy_from_slice(h),
        }
        for c in 0..self.dims.num_classes {
            let row = &self.head.weights[c * hidden..(c + 1) * hidden];
            let mut s = self.head.bias[c] as f64;
            for (&w, &av) in row.iter().zip(&ws.a) {
                s += w as f64 * av;
            }
            ws.logits[c] = s;
        }
    }

    /// Class probabilities (softmax of logits).
    pub fn predict_proba(&self, x: &FeatureVector) -> Result<Vec<f64>, LearnerError> {
        self.check_input(x)?;
        let h = self.backbone.hidden_activations(x);
        Ok(softmax(&self.logits_from_hidden(&h)))
    }

    /// Forward and backward for one example, adding `scale * dloss/dparam`
    /// into `g`. Returns the example's cross-entropy loss.
    fn accumulate(&self, s: &Sample<'_>, scale: f64, g: &mut Gradients, ws: &mut Workspace) -> f64 {
        let hidden = self.dims.hidden;
        let classes = self.dims.num_classes;
        let full = self.mode == HeadMode::Full;

        match (s.hidden, full) {
            (Some(h), false) => ws.h.copy_from_slice(h),
            _ => {
                self.backbone.pre_activation(s.x, &mut ws.z1);
                for (hv, &z) in ws.h.iter_mut().zip(&ws.z1) {
                    *hv = z.max(0.0);
                }
            }
        }
        let h = std::mem::take(&mut ws.h);
        self.forward_from_hidden(&h, ws);
        ws.h = h;

        let max = ws.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (p, &l) in ws.probs.iter_mut().zip(&ws.logits) {
            *p = (l - max).exp();
            denom += *p;
        }
        let loss = denom.ln() + max - ws.logits[s.label];
        for (c, p) in ws.probs.iter_mut().enumerate() {
            *p /= denom;
            ws.dlogits[c] = (*p - if c == s.label { 1.0 } else { 0.0 }) * scale;
        }

        for c in 0..classes {
            let d = ws.dlogits[c];
            let row = &mut g.head_w[c * hidden..(c + 1) * hidden];
            for (gw, &av) in row.iter_mut().zip(&ws.a) {
                *gw += d * av;
            }
            g.head_b[c] += d;
        }

        if self.adapter.is_none() && !full {
            return loss;
        }

        // da = head^T dlogits
        ws.da.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..classes {
            let d = ws.dlogits[c];
            let row = &self.head.weights[c * hidden..(c + 1) * hidden];
            for (dv, &w) in ws.da.iter_mut().zip(row) {
                *dv += w as f64 * d;
            }
        }

        if let (Some(a), Some(ga)) = (&self.adapter, &mut g.adapter) {
            let bn = a.bottleneck;
            ws.dq.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..hidden {
                let d = ws.da[i];
                let grow = &mut ga.up_w[i * bn..(i + 1) * bn];
                let prow = &a.up_w[i * bn..(i + 1) * bn];
                for k in 0..bn {
                    grow[k] += d * ws.q[k];
                    ws.dq[k] += prow[k] as f64 * d;
                }
                ga.up_b[i] += d;
            }
            for k in 0..bn {
                let du = if ws.u[k] > 0.0 { ws.dq[k] } else { 0.0 };
                if du != 0.0 {
                    let grow = &mut ga.down_w[k * hidden..(k + 1) * hidden];
                    for (gw, &hv) in grow.iter_mut().zip(&ws.h) {
                        *gw += du * hv;
                    }
                }
                ga.down_b[k] += du;
            }
        }

        if let Some(gb) = &mut g.backbone {
            for (dz, (&d, &z)) in ws.dz1.iter_mut().zip(ws.da.iter().zip(&ws.z1)) {
                *dz = if z > 0.0 { d } else { 0.0 };
            }
            for (gbias, &dz) in gb.bias.iter_mut().zip(&ws.dz1) {
                *gbias += dz;
            }
            for (j, v) in s.x.iter() {
                if !gb.marked[j] {
                    gb.marked[j] = true;
                    gb.touched.push(j);
                }
                let v = v as f64;
                let col = &mut gb.weights[j * hidden..(j + 1) * hidden];
                for (gw, &dz) in col.iter_mut().zip(&ws.dz1) {
                    *gw += v * dz;
                }
            }
        }
        loss
    }

    /// `param -= lr * grad` over every trainable block.
    fn apply(&mut self, g: &mut Gradients, lr: f64) {
        fn step(p: &mut [f32], g: &[f64], lr: f64) {
            for (w, &gv) in p.iter_mut().zip(g) {
                *w = (*w as f64 - lr * gv) as f32;
            }
        }
        step(&mut self.head.weights, &g.head_w, lr);
        step(&mut self.head.bias, &g.head_b, lr);
        if let (Some(a), Some(ga)) = (&mut self.adapter, &g.adapter) {
            step(&mut a.down_w, &ga.down_w, lr);
            step(&mut a.down_b, &ga.down_b, lr);
            step(&mut a.up_w, &ga.up_w, lr);
            step(&mut a.up_b, &ga.up_b, lr);
        }
        if let Some(gb) = &mut g.backbone {
            let hidden = self.dims.hidden;
            let bb = Arc::make_mut(&mut self.backbone);
            step(&mut bb.bias, &gb.bias, lr);
            gb.touched.sort_unstable();
            for &j in &gb.touched {
                let range = j * hidden..(j + 1) * hidden;
                step(&mut bb.weights[range.clone()], &gb.weights[range], lr);
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One training example as seen by the learner.
///
/// `hidden` may carry precomputed backbone activations for this example; it is
/// only consulted when the backbone is frozen.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a FeatureVector,
    pub label: usize,
    pub hidden: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
struct Workspace {
    z1: Vec<f64>,
    h: Vec<f64>,
    u: Vec<f64>,
    q: Vec<f64>,
    a: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    da: Vec<f64>,
    dq: Vec<f64>,
    dz1: Vec<f64>,
}

impl Workspace {
    fn new(dims: ModelDims, mode: HeadMode) -> Self {
        let bn = mode.bottleneck();
        Workspace {
            z1: vec![0.0; dims.hidden],
            h: vec![0.0; dims.hidden],
            u: vec![0.0; bn],
            q: vec![0.0; bn],
            a: vec![0.0; dims.hidden],
            logits: vec![0.0; dims.num_classes],
            probs: vec![0.0; dims.num_classes],
            dlogits: vec![0.0; dims.num_classes],
            da: vec![0.0; dims.hidden],
            dq: vec![0.0; bn],
            dz1: vec![0.0; dims.hidden],
        }
    }
}

#[derive(Debug, Clone)]
struct AdapterGrad {
    down_w: Vec<f64>,
    down_b: Vec<f64>,
    up_w: Vec<f64>,
    up_b: Vec<f64>,
}

/// Backbone gradient: dense buffer, but only the columns of features seen in
/// the current batch are touched, applied and cleared.
#[derive(Debug, Clone)]
struct BackboneGrad {
    weights: Vec<f64>,
    bias: Vec<f64>,
    touched: Vec<usize>,
    marked: Vec<bool>,
}

#[derive(Debug, Clone)]
struct Gradients {
    backbone: Option<BackboneGrad>,
    adapter: Option<AdapterGrad>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

impl Gradients {
    fn for_params(p: &ModelParams) -> Self {
        let d = p.dims;
        Gradients {
            backbone: (p.mode == HeadMode::Full).then(|| BackboneGrad {
                weights: vec![0.0; d.input_dim * d.hidden],
                bias: vec![0.0; d.hidden],
                touched: Vec::new(),
                marked: vec![false; d.input_dim],
            }),
            adapter: p.adapter.as_ref().map(|a| AdapterGrad {
                down_w: vec![0.0; a.down_w.len()],
                down_b: vec![0.0; a.down_b.len()],
                up_w: vec![0.0; a.up_w.len()],
                up_b: vec![0.0; a.up_b.len()],
            }),
            head_w: vec![0.0; d.num_classes * d.hidden],
            head_b: vec![0.0; d.num_classes],
        }
    }

    fn reset(&mut self) {
        self.head_w.iter_mut().for_each(|v| *v = 0.0);
        self.head_b.iter_mut().for_each(|v| *v = 0.0);
        if let Some(a) = &mut self.adapter {
            for block in [&mut a.down_w, &mut a.down_b, &mut a.up_w, &mut a.up_b] {
                block.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if let Some(b) = &mut self.backbone {
            let hidden = b.bias.len();
            for &j in &b.touched {
                b.weights[j * hidden..(j + 1) * hidden].iter_mut().for_each(|v| *v = 0.0);
                b.marked[j] = false;
            }
            b.touched.clear();
            b.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Dense gradient in payload order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            out.extend_from_slice(&b.weights);
            out.extend_from_slice(&b.bias);
        }
        if let Some(a) = &self.adapter {
            for block in [&a.down_w, &a.down_b, &a.up_w, &a.up_b] {
                out.extend_from_slice(block);
            }
        }
        out.extend_from_slice(&self.head_w);
        out.extend_from_slice(&self.head_b);
        out
    }
}

fn check_samples(params: &ModelParams, data: &[Sample<'_>]) -> Result<(), LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::EmptyData);
    }
    for s in data {
        params.check_input(s.x)?;
        if s.label >= params.dims.num_classes {
            return Err(LearnerError::BadLabel { label: s.label, classes: params.dims.num_classes });
        }
    }
    Ok(())
}

/// Mean cross-entropy over `data` and its gradient w.r.t. every trainable
/// parameter, in payload order. Uses the same code path as training.
pub fn batch_loss_and_gradient(params: &ModelParams, data: &[Sample<'_>]) -> Result<(f64, Vec<f64>), LearnerError> {
    check_samples(params, data)?;
    let mut g = Gradients::for_params(params);
    let mut ws = Workspace::new(params.dims, params.mode);
    let scale = 1.0 / data.len() as f64;
    let mut loss = 0.0;
    for s in data {
        loss += params.accumulate(s, scale, &mut g, &mut ws);
    }
    Ok((loss * scale, g.flatten()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub steps: u64,
    /// Mean per-example loss of each epoch, measured before each batch update.
    pub epoch_losses: Vec<f64>,
}

/// Plain minibatch SGD on the trainable blocks.
///
/// Epoch `e` visits `data` in the order of a permutation drawn from
/// `key.child(e)`, cut into batches of `batch_size` (the last may be short).
/// Within a batch, per-example gradients are accumulated in ascending batch
/// position and averaged.
pub fn train_steps(
    params: &ModelParams,
    data: &[Sample<'_>],
    cfg: &TrainConfig,
    key: &SeedKey,
) -> Result<TrainOutcome, LearnerError> {
    cfg.validate()?;
    check_samples(params, data)?;
    let mut p = params.clone();
    let mut g = Gradients::for_params(&p);
    let mut ws = Workspace::new(p.dims, p.mode);
    let mut steps = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = key.child(epoch as u64).rng().permutation(data.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            g.reset();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += p.accumulate(&data[i], scale, &mut g, &mut ws);
            }
            p.apply(&mut g, cfg.learning_rate);
            steps += 1;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(TrainOutcome { params: p, steps, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Featurizer, SynthSpec};

    fn dims() -> ModelDims {
        ModelDims::new(4096, 256, 2).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(trainable_count(dims(), HeadMode::Full), 1_049_346);
        assert_eq!(trainable_count(dims(), HeadMode::FcOnly), 514);
        assert_eq!(trainable_count(dims(), HeadMode::Adapter { bottleneck: 16 }), 8_978);
        let ratio = 8_978.0 / 1_049_346.0;
        assert!(ratio <= MAX_ADAPTER_RATIO);
    }

    #[test]
    fn footprint_bytes() {
        let f = param_footprint(dims(), HeadMode::FcOnly);
        assert_eq!(f.trainable_count, 514);
        assert_eq!(f.checkpoint_bytes, 4 * 514 + CHECKPOINT_OVERHEAD_BYTES);
        let a = param_footprint(dims(), HeadMode::Adapter { bottleneck: 16 });
        let full = param_footprint(dims(), HeadMode::Full);
        assert!((a.checkpoint_bytes as f64) / (full.checkpoint_bytes as f64) <= 0.05);
    }

    #[test]
    fn oversized_adapter_rejected() {
        let d = ModelDims::new(64, 32, 2).unwrap();
        let err = init_params(d, HeadMode::Adapter { bottleneck: 16 }, 0, 0).unwrap_err();
        assert!(matches!(err, LearnerError::AdapterTooLarge { bottleneck: 16, .. }));
    }

    #[test]
    fn init_is_deterministic() {
        let d = ModelDims::new(256, 32, 3).unwrap();
        for mode in [HeadMode::Full, HeadMode::FcOnly, HeadMode::Adapter { bottleneck: 1 }] {
            let a = init_params(d, mode, 9, 2).unwrap();
            let b = init_params(d, mode, 9, 2).unwrap();
            assert_eq!(a.trainable_payload(), b.trainable_payload());
            assert_eq!(a.backbone.weights, b.backbone.weights);
            let c = init_params(d, mode, 9, 3).unwrap();
            assert_ne!(a.head.weights, c.head.weights, "shards get distinct init streams");
            assert_eq!(a.backbone.weights, c.backbone.weights, "backbone is shared across shards");
        }
    }

    #[test]
    fn payload_round_trip() {
        let d = ModelDims::new(128, 16, 2).unwrap();
        for mode in [HeadMode::Full, HeadMode::FcOnly, HeadMode::Adapter { bottleneck: 1 }] {
            let a = init_params(d, mode, 1, 0).unwrap();
            let b = init_params(d, mode, 2, 5).unwrap();
            let mut c = b.clone();
            c.load_trainable(&a.trainable_payload()).unwrap();
            assert_eq!(c.trainable_payload(), a.trainable_payload());
            assert!(c.load_trainable(&[0.0; 3]).is_err());
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let d = ModelDims::new(64, 8, 4).unwrap();
        let mut p = init_params(d, HeadMode::FcOnly, 0, 0).unwrap();
        p.head.weights.iter_mut().for_each(|w| *w = 0.0);
        p.head.bias.iter_mut().for_each(|w| *w = 0.0);
        let probs = p.predict_proba(&FeatureVector::zeros(64)).unwrap();
        assert!(probs.iter().all(|&q| (q - 0.25).abs() < 1e-12));
    }

    #[test]
    fn predict_checks_dimension() {
        let d = ModelDims::new(64, 8, 2).unwrap();
        let p = init_params(d, HeadMode::FcOnly, 0, 0).unwrap();
        assert_eq!(
            p.predict_proba(&FeatureVector::zeros(32)),
            Err(LearnerError::DimMismatch { expected: 64, got: 32 })
        );
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("adapter:8".parse::<HeadMode>(), Ok(HeadMode::Adapter { bottleneck: 8 }));
        assert_eq!("fc".parse::<HeadMode>(), Ok(HeadMode::FcOnly));
        assert!("adapter:0".parse::<HeadMode>().is_err());
        for m in [HeadMode::Full, HeadMode::FcOnly, HeadMode::Adapter { bottleneck: 3 }] {
            assert_eq!(m.to_string().parse::<HeadMode>(), Ok(m));
            assert_eq!(HeadMode::from_code(m.code(), m.bottleneck()), Some(m));
        }
    }

    #[test]
    fn steps_count() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.steps_for(100), 70);
        assert_eq!(cfg.steps_for(16), 10);
        assert_eq!(cfg.steps_for(17), 20);
    }

    fn toy_samples(n: usize, dim: usize) -> (Vec<FeatureVector>, Vec<usize>) {
        let ds = synth_generate(&SynthSpec {
            num_classes: 2,
            vocab_size: 200,
            tokens_per_example: 10,
            n,
            separation: 1.0,
            seed: 3,
        })
        .unwrap();
        let f = Featurizer::new(dim, 256).unwrap();
        (ds.examples().iter().map(|e| f.featurize(e)).collect(), ds.examples().iter().map(|e| e.label).collect())
    }

    #[test]
    fn empty_data_rejected() {
        let p = init_params(ModelDims::new(64, 8, 2).unwrap(), HeadMode::FcOnly, 0, 0).unwrap();
        let r = train_steps(&p, &[], &TrainConfig::default(), &SeedKey::new(0));
        assert!(matches!(r, Err(LearnerError::EmptyData)));
    }

    #[test]
    fn train_reports_steps_and_is_deterministic() {
        let (xs, ys) = toy_samples(100, 256);
        let d = ModelDims::new(256, 16, 2).unwrap();
        let data: Vec<Sample> = xs.iter().zip(&ys).map(|(x, &label)| Sample { x, label, hidden: None }).collect();
        for mode in [HeadMode::Full, HeadMode::FcOnly, HeadMode::Adapter { bottleneck: 1 }] {
            let p = init_params(d, mode, 1, 0).unwrap();
            let key = SeedKey::new(1).tag("slice").with(0).with(0);
            let a = train_steps(&p, &data, &TrainConfig::default(), &key).unwrap();
            let b = train_steps(&p, &data, &TrainConfig::default(), &key).unwrap();
            assert_eq!(a.steps, 70);
            assert_eq!(a.params.trainable_payload(), b.params.trainable_payload());
            assert_ne!(a.params.trainable_payload(), p.trainable_payload());
            if mode.frozen_backbone() {
                assert_eq!(a.params.backbone.to_bytes(), p.backbone.to_bytes());
            } else {
                assert_ne!(a.params.backbone.weights, p.backbone.weights);
            }
        }
    }

    #[test]
    fn cached_hidden_matches_recomputed() {
        let (xs, ys) = toy_samples(40, 256);
        let d = ModelDims::new(256, 16, 2).unwrap();
        let p = init_params(d, HeadMode::Adapter { bottleneck: 2 }, 4, 1).unwrap();
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| p.backbone.hidden_activations(x)).collect();
        let plain: Vec<Sample> = xs.iter().zip(&ys).map(|(x, &label)| Sample { x, label, hidden: None }).collect();
        let cached: Vec<Sample> = xs
            .iter()
            .zip(&ys)
            .zip(&hs)
            .map(|((x, &label), h)| Sample { x, label, hidden: Some(h) })
            .collect();
        let key = SeedKey::new(2);
        let a = train_steps(&p, &plain, &TrainConfig::default(), &key).unwrap();
        let b = train_steps(&p, &cached, &TrainConfig::default(), &key).unwrap();
        assert_eq!(a.params.trainable_payload(), b.params.trainable_payload());
    }
}
