//! The dual-input fusion classifier and its single-modality baselines.
//!
//! The fusion network runs an image branch (conv stem, adaptive max pool,
//! patch embedding, transformer encoder blocks, token mean, projection to an
//! F x g x g map) next to a CIR branch (two same-size convolutions), then
//! concatenates the maps along channels and classifies per cell through a
//! convolution stack ending in a 1x1 reduction and a sigmoid. Training is
//! Adam on summed-per-cell binary cross-entropy, batch-meaned, with seeded
//! shuffling; gradients of a batch are summed in a fixed sample order, so
//! runs are bit-reproducible at any thread count.

use crate::dataset::{Dataset, Sample, Split};
use crate::tensor::{AttentionParams, Scalar, Tape, TensorError, TensorId, BCE_EPS};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Output channels of the two-layer image stem.
const STEM_CHANNELS: usize = 8;
/// Feed-forward hidden width as a multiple of the embedding dim.
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Fusion,
    RgbOnly,
    CirOnly,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Fusion => write!(f, "fusion"),
            ModelKind::RgbOnly => write!(f, "rgb_only"),
            ModelKind::CirOnly => write!(f, "cir_only"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "fusion" => Ok(ModelKind::Fusion),
            "rgb" | "rgb_only" => Ok(ModelKind::RgbOnly),
            "cir" | "cir_only" => Ok(ModelKind::CirOnly),
            other => Err(ModelError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Network dimensions. Desk defaults keep a laptop run fast; `paper_scale`
/// switches the four paper-sized dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub branch_channels: usize,
    pub grid: usize,
    pub fusion_depth: usize,
    pub classifier_depth: usize,
    pub paper_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 96,
            patch: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            branch_channels: 16,
            grid: 30,
            fusion_depth: 3,
            classifier_depth: 3,
            paper_scale: false,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        ModelConfig {
            image_side: 224,
            patch: 16,
            embed_dim: 768,
            branch_channels: 128,
            paper_scale: true,
            ..ModelConfig::default()
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_side % self.patch != 0 {
            return Err(ModelError::Config(format!(
                "image side {} not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.branch_channels < 2 || self.branch_channels % 2 != 0 {
            return Err(ModelError::Config(format!(
                "branch channels must be even and at least 2, got {}",
                self.branch_channels
            )));
        }
        if self.grid < 2 || self.depth == 0 || self.fusion_depth == 0 || self.classifier_depth < 2 {
            return Err(ModelError::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }
}

/// One named weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// All learnable weights of one model, serializable as "SNLM".
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug)]
pub enum ModelError {
    Config(String),
    Domain(String),
    Tensor(TensorError),
    Format(String),
    Io(io::Error),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "model config error: {msg}"),
            ModelError::Domain(msg) => write!(f, "model domain error: {msg}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Format(msg) => write!(f, "checkpoint format error: {msg}"),
            ModelError::Io(e) => write!(f, "checkpoint io error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<io::Error> for ModelError {
    fn from(e: io::Error) -> Self {
        ModelError::Io(e)
    }
}

/// Channel widths of the classifier stack: halving 3x3 stages, then 1x1 to 1.
fn classifier_channels(cfg: &ModelConfig) -> Vec<usize> {
    let mut chans = vec![2 * cfg.branch_channels];
    for _ in 0..cfg.classifier_depth - 1 {
        let next = (chans.last().unwrap() / 2).max(1);
        chans.push(next);
    }
    chans.push(1);
    chans
}

/// Declarative list of (name, shape) for every weight of a model kind.
fn param_specs(kind: ModelKind, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let f = cfg.branch_channels;
    let d = cfg.embed_dim;
    let g = cfg.grid;
    let n = cfg.tokens();
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>| specs.push((name.to_string(), shape));
    match kind {
        ModelKind::Fusion => {
            push("stem.conv1.w", vec![STEM_CHANNELS, 3, 3, 3]);
            push("stem.conv1.b", vec![STEM_CHANNELS]);
            push("stem.conv2.w", vec![STEM_CHANNELS, STEM_CHANNELS, 3, 3]);
            push("stem.conv2.b", vec![STEM_CHANNELS]);
            push("vit.embed.w", vec![d, cfg.patch * cfg.patch * STEM_CHANNELS]);
            push("vit.pos", vec![n, d]);
            for l in 0..cfg.depth {
                for part in ["ln1.g", "ln1.b", "ln2.g", "ln2.b"] {
                    push(&format!("vit.block{l}.{part}"), vec![d]);
                }
                for part in ["wq", "wk", "wv", "wo"] {
                    push(&format!("vit.block{l}.attn.{part}"), vec![d, d]);
                    push(&format!("vit.block{l}.attn.b{}", &part[1..]), vec![d]);
                }
                push(&format!("vit.block{l}.ffn.w1"), vec![MLP_RATIO * d, d]);
                push(&format!("vit.block{l}.ffn.b1"), vec![MLP_RATIO * d]);
                push(&format!("vit.block{l}.ffn.w2"), vec![d, MLP_RATIO * d]);
                push(&format!("vit.block{l}.ffn.b2"), vec![d]);
            }
            push("vit.head.w", vec![f * g * g, d]);
            push("vit.head.b", vec![f * g * g]);
            push("cir.conv1.w", vec![f, 2, 3, 3]);
            push("cir.conv1.b", vec![f]);
            push("cir.conv2.w", vec![f, f, 3, 3]);
            push("cir.conv2.b", vec![f]);
            for i in 0..cfg.fusion_depth {
                push(&format!("fusion.conv{i}.w"), vec![2 * f, 2 * f, 3, 3]);
                push(&format!("fusion.conv{i}.b"), vec![2 * f]);
            }
            let chans = classifier_channels(cfg);
            for i in 0..chans.len() - 1 {
                let k = if i + 2 == chans.len() { 1 } else { 3 };
                push(&format!("cls.conv{i}.w"), vec![chans[i + 1], chans[i], k, k]);
                push(&format!("cls.conv{i}.b"), vec![chans[i + 1]]);
            }
        }
        ModelKind::RgbOnly => {
            push("stem.conv1.w", vec![STEM_CHANNELS, 3, 3, 3]);
            push("stem.conv1.b", vec![STEM_CHANNELS]);
            push("stem.conv2.w", vec![STEM_CHANNELS, STEM_CHANNELS, 3, 3]);
            push("stem.conv2.b", vec![STEM_CHANNELS]);
            push("head.conv1.w", vec![f, STEM_CHANNELS, 3, 3]);
            push("head.conv1.b", vec![f]);
            push("head.conv2.w", vec![f / 2, f, 3, 3]);
            push("head.conv2.b", vec![f / 2]);
            push("head.conv3.w", vec![1, f / 2, 1, 1]);
            push("head.conv3.b", vec![1]);
        }
        ModelKind::CirOnly => {
            push("mlp.w1", vec![4 * g * g, 2 * g * g]);
            push("mlp.b1", vec![4 * g * g]);
            push("mlp.w2", vec![g * g, 4 * g * g]);
            push("mlp.b2", vec![g * g]);
        }
    }
    specs
}

/// Uniform fan-in init scale for a weight tensor; biases and norm shifts are
/// zero, norm gains one.
fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha12Rng) -> Vec<f32> {
    let len: usize = shape.iter().product();
    if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name.contains(".attn.b") {
        return vec![0.0; len];
    }
    if name.ends_with("ln1.g") || name.ends_with("ln2.g") {
        return vec![1.0; len];
    }
    if name.ends_with("ln1.b") || name.ends_with("ln2.b") {
        return vec![0.0; len];
    }
    let fan_in: usize = match shape.len() {
        1 => shape[0],              // positional table rows scale by dim below
        2 => shape[1],
        4 => shape[1] * shape[2] * shape[3],
        _ => len,
    };
    let fan_in = if shape.len() == 1 { shape[0] } else { fan_in };
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-s..s) as f32).collect()
}

impl ModelParams {
    /// Fresh seeded parameters for a model kind.
    pub fn init(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, shape) in param_specs(kind, config) {
            let data = if name == "vit.pos" {
                let s = 1.0 / (config.embed_dim as f64).sqrt();
                (0..shape.iter().product::<usize>())
                    .map(|_| rng.gen_range(-s..s) as f32)
                    .collect()
            } else {
                init_tensor(&name, &shape, &mut rng)
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(ModelParams {
            kind,
            config: *config,
            tensors,
        })
    }

    fn index(&self, name: &str) -> usize {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

// --- forward passes ---

/// One shareable master buffer per parameter tensor; bound into per-sample
/// tapes without copying.
fn master_buffers<T: Scalar>(params: &ModelParams) -> Vec<Arc<Vec<T>>> {
    params
        .tensors
        .iter()
        .map(|t| Arc::new(t.data.iter().map(|&v| T::from_f32(v)).collect()))
        .collect()
}

/// Parameters bound onto a tape, plus the input plumbing for one sample.
/// The tape can be reset to the parameter prefix and reused across samples.
struct Bound<'p, T: Scalar> {
    tape: Tape<T>,
    params: &'p ModelParams,
    ids: Vec<TensorId>,
    mark: usize,
}

impl<'p, T: Scalar> Bound<'p, T> {
    fn new(params: &'p ModelParams, trainable: bool) -> Self {
        let masters = master_buffers(params);
        Self::with_masters(params, &masters, trainable)
    }

    fn with_masters(params: &'p ModelParams, masters: &[Arc<Vec<T>>], trainable: bool) -> Self {
        let mut tape = Tape::new();
        let ids = params
            .tensors
            .iter()
            .zip(masters)
            .map(|(t, m)| tape.shared_leaf(&t.shape, m.clone(), trainable))
            .collect();
        let mark = tape.mark();
        Bound { tape, params, ids, mark }
    }

    /// Drops the per-sample subgraph and clears gradients, keeping the
    /// parameter leaves and their buffers.
    fn reset(&mut self) {
        self.tape.reset_to(self.mark);
    }

    fn p(&self, name: &str) -> TensorId {
        self.ids[self.params.index(name)]
    }

    fn conv_relu(&mut self, x: TensorId, name: &str) -> Result<TensorId, TensorError> {
        let c = self.tape.conv2d_same(x, self.p(&format!("{name}.w")), self.p(&format!("{name}.b")))?;
        Ok(self.tape.relu(c))
    }

    fn conv(&mut self, x: TensorId, name: &str) -> Result<TensorId, TensorError> {
        self.tape.conv2d_same(x, self.p(&format!("{name}.w")), self.p(&format!("{name}.b")))
    }

    /// Image stem shared by the fusion and rgb-only models.
    fn stem(&mut self, image: &crate::sensing::Image) -> Result<TensorId, TensorError> {
        let res = image.resolution;
        let data: Vec<T> = image.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        let x = self.tape.constant(&[3, res, res], data);
        let h = self.conv_relu(x, "stem.conv1")?;
        self.conv_relu(h, "stem.conv2")
    }

    /// Image branch producing the F x g x g feature map.
    fn vit_branch(&mut self, image: &crate::sensing::Image) -> Result<TensorId, TensorError> {
        let cfg = &self.params.config;
        let f0 = self.stem(image)?;
        let pooled = self.tape.adaptive_max_pool(f0, cfg.image_side, cfg.image_side)?;
        let tokens = self.tape.patchify(pooled, cfg.patch)?;
        let emb = self.tape.matmul_nt(tokens, self.p("vit.embed.w"))?;
        let mut z = self.tape.add(emb, self.p("vit.pos"))?;
        for l in 0..cfg.depth {
            let b = format!("vit.block{l}");
            let n1 = self
                .tape
                .layer_norm(z, self.p(&format!("{b}.ln1.g")), self.p(&format!("{b}.ln1.b")))?;
            let attn = AttentionParams {
                wq: self.p(&format!("{b}.attn.wq")),
                bq: self.p(&format!("{b}.attn.bq")),
                wk: self.p(&format!("{b}.attn.wk")),
                bk: self.p(&format!("{b}.attn.bk")),
                wv: self.p(&format!("{b}.attn.wv")),
                bv: self.p(&format!("{b}.attn.bv")),
                wo: self.p(&format!("{b}.attn.wo")),
                bo: self.p(&format!("{b}.attn.bo")),
            };
            let a = self.tape.multi_head_self_attention(n1, &attn, cfg.heads)?;
            let n2 = self
                .tape
                .layer_norm(z, self.p(&format!("{b}.ln2.g")), self.p(&format!("{b}.ln2.b")))?;
            let ff = self.tape.feed_forward(
                n2,
                self.p(&format!("{b}.ffn.w1")),
                self.p(&format!("{b}.ffn.b1")),
                self.p(&format!("{b}.ffn.w2")),
                self.p(&format!("{b}.ffn.b2")),
            )?;
            let za = self.tape.add(z, a)?;
            z = self.tape.add(za, ff)?;
        }
        let v = self.tape.mean_rows(z)?;
        let head = self.tape.linear(v, self.p("vit.head.w"), self.p("vit.head.b"))?;
        self.tape
            .reshape(head, &[cfg.branch_channels, cfg.grid, cfg.grid])
    }

    /// CIR branch: two same-size convolutions, ReLU between them.
    fn cnn_branch(&mut self, cir: &[T]) -> Result<TensorId, TensorError> {
        let g = self.params.config.grid;
        let x = self.tape.constant(&[2, g, g], cir.to_vec());
        let h = self.conv_relu(x, "cir.conv1")?;
        self.conv(h, "cir.conv2")
    }

    fn fuse_and_classify(&mut self, f_vit: TensorId, f_cnn: TensorId) -> Result<TensorId, TensorError> {
        let cfg = &self.params.config;
        let mut h = self.tape.concat_channels(f_vit, f_cnn)?;
        for i in 0..cfg.fusion_depth {
            h = self.conv_relu(h, &format!("fusion.conv{i}"))?;
        }
        let stages = classifier_channels(cfg).len() - 1;
        for i in 0..stages - 1 {
            h = self.conv_relu(h, &format!("cls.conv{i}"))?;
        }
        let logits = self.conv(h, &format!("cls.conv{}", stages - 1))?;
        let prob = self.tape.sigmoid(logits);
        let g = cfg.grid;
        self.tape.reshape(prob, &[g, g])
    }

    /// Probability map for the bound model kind.
    fn prob_map(&mut self, sample: &Sample) -> Result<TensorId, TensorError> {
        let cfg = &self.params.config;
        let g = cfg.grid;
        match self.params.kind {
            ModelKind::Fusion => {
                let cir: Vec<T> = sample
                    .cir
                    .re
                    .iter()
                    .chain(&sample.cir.im)
                    .map(|&v| T::from_f64(v as f64))
                    .collect();
                let fv = self.vit_branch(&sample.image)?;
                let fc = self.cnn_branch(&cir)?;
                self.fuse_and_classify(fv, fc)
            }
            ModelKind::RgbOnly => {
                let f0 = self.stem(&sample.image)?;
                let pooled = self.tape.adaptive_max_pool(f0, g, g)?;
                let h = self.conv_relu(pooled, "head.conv1")?;
                let h = self.conv_relu(h, "head.conv2")?;
                let logits = self.conv(h, "head.conv3")?;
                let prob = self.tape.sigmoid(logits);
                self.tape.reshape(prob, &[g, g])
            }
            ModelKind::CirOnly => {
                let cir: Vec<T> = sample
                    .cir
                    .re
                    .iter()
                    .chain(&sample.cir.im)
                    .map(|&v| T::from_f64(v as f64))
                    .collect();
                let x = self.tape.constant(&[2 * g * g], cir);
                let h = self.tape.linear(x, self.p("mlp.w1"), self.p("mlp.b1"))?;
                let h = self.tape.relu(h);
                let logits = self.tape.linear(h, self.p("mlp.w2"), self.p("mlp.b2"))?;
                let prob = self.tape.sigmoid(logits);
                self.tape.reshape(prob, &[g, g])
            }
        }
    }

    fn loss(&mut self, sample: &Sample) -> Result<(TensorId, TensorId), TensorError> {
        let g = self.params.config.grid;
        let prob = self.prob_map(sample)?;
        let labels: Vec<T> = sample.labels.values.iter().map(|&v| T::from_f64(v as f64)).collect();
        let y = self.tape.constant(&[g, g], labels);
        let loss = self.tape.bce_sum(prob, y)?;
        Ok((prob, loss))
    }
}

/// Hard 0/1 decisions: probability at least 0.5 maps to 1.
pub fn decide(prob: &[f32]) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

/// Per-receiver probabilities and hard decisions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub g: usize,
    pub prob: Vec<f32>,
    pub hard: Vec<u8>,
}

/// Forward pass without gradients.
pub fn predict(params: &ModelParams, sample: &Sample) -> Result<Prediction, ModelError> {
    check_sample(params, sample)?;
    let mut bound: Bound<f32> = Bound::new(params, false);
    let prob_id = bound.prob_map(sample)?;
    let prob = bound.tape.value(prob_id).to_vec();
    let hard = decide(&prob);
    Ok(Prediction {
        g: params.config.grid,
        prob,
        hard,
    })
}

fn check_sample(params: &ModelParams, sample: &Sample) -> Result<(), ModelError> {
    let g = params.config.grid;
    if sample.labels.g != g || sample.cir.g != g {
        return Err(ModelError::Config(format!(
            "sample grid {} does not match model grid {g}",
            sample.labels.g
        )));
    }
    Ok(())
}

/// Mean over a batch of summed per-cell binary cross-entropy.
pub fn bce_loss(probs: &[&[f32]], labels: &[&[u8]]) -> Result<f64, ModelError> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(ModelError::Domain("batch of probabilities and labels must align".into()));
    }
    let mut total = 0.0f64;
    for (p, y) in probs.iter().zip(labels) {
        if p.len() != y.len() {
            return Err(ModelError::Domain("probability/label length mismatch".into()));
        }
        for (&pi, &yi) in p.iter().zip(y.iter()) {
            if yi > 1 {
                return Err(ModelError::Domain(format!("label {yi} is not in {{0, 1}}")));
            }
            let pf = (pi as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= if yi == 1 { pf.ln() } else { (1.0 - pf).ln() };
        }
    }
    Ok(total / probs.len() as f64)
}

/// Loss and per-parameter gradients for one sample.
pub fn sample_loss_and_grads<T: Scalar>(
    params: &ModelParams,
    sample: &Sample,
) -> Result<(f64, Vec<Vec<T>>), ModelError> {
    check_sample(params, sample)?;
    let mut bound: Bound<T> = Bound::new(params, true);
    let (_, loss) = bound.loss(sample)?;
    let loss_val = bound.tape.value(loss)[0].to_f64();
    bound.tape.backward(loss)?;
    let grads = bound
        .ids
        .iter()
        .zip(&params.tensors)
        .map(|(&id, t)| {
            bound
                .tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::ZERO; t.data.len()])
        })
        .collect();
    Ok((loss_val, grads))
}

/// Forward-only loss in f64 with one parameter coordinate shifted, for
/// finite-difference checks.
pub fn sample_loss_shifted(
    params: &ModelParams,
    sample: &Sample,
    tensor: usize,
    coord: usize,
    delta: f64,
) -> Result<f64, ModelError> {
    check_sample(params, sample)?;
    // Owned leaves so one coordinate can be probed in place.
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<TensorId> = params
        .tensors
        .iter()
        .map(|t| {
            let data: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
            tape.constant(&t.shape, data)
        })
        .collect();
    let mark = tape.mark();
    let mut bound = Bound {
        tape,
        params,
        ids,
        mark,
    };
    let id = bound.ids[tensor];
    let base = params.tensors[tensor].data[coord] as f64;
    bound.tape.overwrite_leaf(id, coord, base + delta);
    let (_, loss) = bound.loss(sample)?;
    Ok(bound.tape.value(loss)[0])
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: a fixed 30-epoch budget at a reduced rate.
    pub fn fine_tune(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-4,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the run has no test split.
    pub test_accuracy: f64,
}

/// Train a fresh model on the split's training routes.
pub fn train(
    kind: ModelKind,
    config: &ModelConfig,
    ds: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>), ModelError> {
    if split.train_ids.is_empty() {
        return Err(ModelError::Domain("training split is empty".into()));
    }
    if config.grid != ds.meta.g as usize {
        return Err(ModelError::Config(format!(
            "model grid {} does not match dataset grid {}",
            config.grid, ds.meta.g
        )));
    }
    let params = ModelParams::init(kind, config, cfg.seed)?;
    train_from(params, ds, &split.train_ids, &split.test_ids, cfg)
}

/// Continue optimizing existing parameters on the given sample ids.
pub fn train_from(
    params: ModelParams,
    ds: &Dataset,
    train_ids: &[usize],
    test_ids: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>), ModelError> {
    if train_ids.is_empty() {
        return Err(ModelError::Domain("training id list is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch size must be at least 1".into()));
    }
    let mut params = params;
    let mut m: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut v: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut step = 0u64;
    let mut order: Vec<usize> = train_ids.to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.epochs);
    // Per-slot gradient buffers are allocated once and stay warm; batch
    // results land in chunk order, so summation order is fixed and runs are
    // reproducible at any thread count.
    let mut slots: Vec<(f64, Vec<Vec<f32>>)> = (0..cfg.batch_size.min(train_ids.len()))
        .map(|_| (0.0, params.tensors.iter().map(|t| vec![0.0f32; t.data.len()]).collect()))
        .collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let masters: Vec<Arc<Vec<f32>>> = master_buffers(&params);
            let params_ref = &params;
            let masters_ref = &masters;
            let status: Vec<Result<(), ModelError>> = slots[..chunk.len()]
                .par_iter_mut()
                .zip(chunk)
                .map_init(
                    || Bound::with_masters(params_ref, masters_ref, true),
                    |bound, (slot, &i)| {
                        bound.reset();
                        let (_, loss) = bound.loss(&ds.samples[i])?;
                        slot.0 = bound.tape.value(loss)[0] as f64;
                        bound.tape.backward(loss)?;
                        for ((&id, t), out) in bound.ids.iter().zip(&params_ref.tensors).zip(slot.1.iter_mut()) {
                            match bound.tape.grad(id) {
                                Some(g) => out.copy_from_slice(g),
                                None => out[..t.data.len()].fill(0.0),
                            }
                        }
                        Ok(())
                    },
                )
                .collect();
            for r in status {
                r?;
            }
            let inv_m = 1.0 / chunk.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            for &(loss, _) in &slots[..chunk.len()] {
                epoch_loss += loss;
            }
            for ti in 0..params.tensors.len() {
                let (pm, pv, pd) = (&mut m[ti], &mut v[ti], &mut params.tensors[ti].data);
                for i in 0..pd.len() {
                    let mut g = 0.0f64;
                    for (_, slot_grads) in &slots[..chunk.len()] {
                        g += slot_grads[ti][i] as f64;
                    }
                    g *= inv_m;
                    let nm = cfg.beta1 * pm[i] as f64 + (1.0 - cfg.beta1) * g;
                    let nv = cfg.beta2 * pv[i] as f64 + (1.0 - cfg.beta2) * g * g;
                    pm[i] = nm as f32;
                    pv[i] = nv as f32;
                    let mhat = nm / bc1;
                    let vhat = nv / bc2;
                    pd[i] -= (cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps)) as f32;
                }
            }
        }
        let test_accuracy = if test_ids.is_empty() {
            f64::NAN
        } else {
            evaluate(&params, ds, test_ids)?.accuracy
        };
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: epoch_loss / train_ids.len() as f64,
            test_accuracy,
        });
    }
    Ok((params, history))
}

/// Continue optimization on a few-shot subset; an empty subset is zero-shot
/// and returns the parameters unchanged.
pub fn fine_tune(
    params: &ModelParams,
    ds: &Dataset,
    subset: &[usize],
    cfg: &TrainConfig,
) -> Result<ModelParams, ModelError> {
    if subset.is_empty() {
        return Ok(params.clone());
    }
    let (tuned, _) = train_from(params.clone(), ds, subset, &[], cfg)?;
    Ok(tuned)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotAccuracy {
    pub route_id: u32,
    pub snapshot_index: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Cell counts indexed by [true label][predicted label].
    pub confusion: [[u64; 2]; 2],
    pub per_snapshot: Vec<SnapshotAccuracy>,
}

/// Cell-level accuracy, confusion counts and a per-snapshot accuracy series.
pub fn evaluate(params: &ModelParams, ds: &Dataset, ids: &[usize]) -> Result<EvalReport, ModelError> {
    if ids.is_empty() {
        return Err(ModelError::Domain("evaluation id list is empty".into()));
    }
    let per: Vec<Result<(SnapshotAccuracy, [[u64; 2]; 2]), ModelError>> = ids
        .par_iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let pred = predict(params, s)?;
            let mut conf = [[0u64; 2]; 2];
            for (&t, &p) in s.labels.values.iter().zip(&pred.hard) {
                conf[t as usize][p as usize] += 1;
            }
            let correct = conf[0][0] + conf[1][1];
            let total = s.labels.values.len() as u64;
            Ok((
                SnapshotAccuracy {
                    route_id: s.route_id,
                    snapshot_index: s.snapshot_index,
                    accuracy: correct as f64 / total as f64,
                },
                conf,
            ))
        })
        .collect();
    let mut confusion = [[0u64; 2]; 2];
    let mut per_snapshot = Vec::with_capacity(ids.len());
    for r in per {
        let (snap, conf) = r?;
        for t in 0..2 {
            for p in 0..2 {
                confusion[t][p] += conf[t][p];
            }
        }
        per_snapshot.push(snap);
    }
    let correct = confusion[0][0] + confusion[1][1];
    let total: u64 = confusion.iter().flatten().sum();
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        confusion,
        per_snapshot,
    })
}

// --- checkpoint io ---

const CKPT_MAGIC: &[u8; 4] = b"SNLM";
const CKPT_VERSION: u32 = 1;

impl ModelParams {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_to(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let kind = match self.kind {
            ModelKind::Fusion => 0u8,
            ModelKind::RgbOnly => 1,
            ModelKind::CirOnly => 2,
        };
        w.write_all(&[kind])?;
        let c = &self.config;
        for v in [
            c.image_side,
            c.patch,
            c.embed_dim,
            c.depth,
            c.heads,
            c.branch_channels,
            c.grid,
            c.fusion_depth,
            c.classifier_depth,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(c.paper_scale)])?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelParams, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::load_from(&mut r)
    }

    pub fn load_from(r: &mut impl Read) -> Result<ModelParams, ModelError> {
        fn rd_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
            r.read_exact(buf).map_err(|e| {
                if e.kind() == io::ErrorKind::UnexpectedEof {
                    ModelError::Format("truncated checkpoint".into())
                } else {
                    ModelError::Io(e)
                }
            })
        }
        fn rd_u32(r: &mut impl Read) -> Result<u32, ModelError> {
            let mut b = [0u8; 4];
            rd_exact(r, &mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        rd_exact(r, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(ModelError::Format(format!("bad magic {magic:?}, expected SNLM")));
        }
        let version = rd_u32(r)?;
        if version != CKPT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let mut kind_b = [0u8; 1];
        rd_exact(r, &mut kind_b)?;
        let kind = match kind_b[0] {
            0 => ModelKind::Fusion,
            1 => ModelKind::RgbOnly,
            2 => ModelKind::CirOnly,
            other => return Err(ModelError::Format(format!("unknown model kind byte {other}"))),
        };
        let mut dims = [0u32; 9];
        for d in &mut dims {
            *d = rd_u32(r)?;
        }
        let mut ps = [0u8; 1];
        rd_exact(r, &mut ps)?;
        let config = ModelConfig {
            image_side: dims[0] as usize,
            patch: dims[1] as usize,
            embed_dim: dims[2] as usize,
            depth: dims[3] as usize,
            heads: dims[4] as usize,
            branch_channels: dims[5] as usize,
            grid: dims[6] as usize,
            fusion_depth: dims[7] as usize,
            classifier_depth: dims[8] as usize,
            paper_scale: ps[0] != 0,
        };
        let count = rd_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = rd_u32(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            rd_exact(r, &mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
            let rank = rd_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd_u32(r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; len * 4];
            rd_exact(r, &mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let params = ModelParams { kind, config, tensors };
        // Shapes must agree with what the config dictates.
        let expected = param_specs(kind, &config);
        if expected.len() != params.tensors.len()
            || expected
                .iter()
                .zip(&params.tensors)
                .any(|((n, s), t)| *n != t.name || *s != t.shape)
        {
            return Err(ModelError::Format("tensor list does not match model config".into()));
        }
        Ok(params)
    }
}
