//! A small pre-norm vision transformer with hand-written reverse mode.
//!
//! Shape table for a config with resolution `R`, patch `P`, width `D`,
//! `L` blocks, MLP hidden `H = mlp_ratio * D` and output `d`
//! (`T = (R/P)^2` tokens, patch vector length `K = 3 P^2`):
//!
//! | tensor                    | shape      | layer    |
//! |---------------------------|------------|----------|
//! | `patch_embed.weight`      | `D x K`    | 0        |
//! | `patch_embed.bias`        | `D`        | 0        |
//! | `pos_embed`               | `T x D`    | 0        |
//! | `blocks.i.norm1.gamma`    | `D`        | i + 1    |
//! | `blocks.i.norm1.beta`     | `D`        | i + 1    |
//! | `blocks.i.qkv.weight`     | `3D x D`   | i + 1    |
//! | `blocks.i.qkv.bias`       | `3D`       | i + 1    |
//! | `blocks.i.attn_out.weight`| `D x D`    | i + 1    |
//! | `blocks.i.attn_out.bias`  | `D`        | i + 1    |
//! | `blocks.i.norm2.gamma`    | `D`        | i + 1    |
//! | `blocks.i.norm2.beta`     | `D`        | i + 1    |
//! | `blocks.i.fc1.weight`     | `H x D`    | i + 1    |
//! | `blocks.i.fc1.bias`       | `H`        | i + 1    |
//! | `blocks.i.fc2.weight`     | `D x H`    | i + 1    |
//! | `blocks.i.fc2.bias`       | `D`        | i + 1    |
//! | `head.weight`             | `d x D`    | L + 1    |
//! | `head.bias`               | `d`        | L + 1    |
//!
//! Pixels enter multiplied by [`PIXEL_SCALE`] so that patch content, not the
//! unit-normal positional embeddings, dominates the token stream. The output
//! tokens pass through a LayerNorm without affine parameters (the head
//! already provides the scale and shift) before mean pooling.
//!
//! Trainability is tracked per layer.

mod checkpoint;
mod net;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub use checkpoint::{checkpoint_checksum, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use net::{backward, embed, forward, forward_input, patchify, ActivationCache, Input};

pub const PIXEL_SCALE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            resolution: 32,
            patch_size: 4,
            embed_dim: 128,
            n_blocks: 2,
            n_heads: 4,
            mlp_ratio: 2,
            output_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// The gradient-check configuration: 16x16 input, 2 blocks, d = 8.
    pub fn tiny() -> Self {
        EncoderConfig {
            resolution: 16,
            patch_size: 4,
            embed_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 2,
            output_dim: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.resolution == 0 || self.resolution % self.patch_size != 0 {
            return bad(format!("patch_size {} must divide resolution {}", self.patch_size, self.resolution));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("n_heads {} must divide embed_dim {}", self.n_heads, self.embed_dim));
        }
        if self.output_dim < 2 {
            return bad(format!("output_dim must be at least 2, got {}", self.output_dim));
        }
        if self.n_blocks < 1 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.mlp_ratio < 1 {
            return bad("mlp_ratio must be at least 1".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.resolution / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Number of trainability groups: patch embedding, each block, head.
    pub fn n_layers(&self) -> usize {
        self.n_blocks + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init(rng: &mut Rng, out: usize, inp: usize) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out, inp), || rng.sample::<f64, _>(StandardNormal) * std);
        Linear { weight, bias: Array1::zeros(out) }
    }

    fn zeros_like(&self) -> Self {
        Linear { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    fn zeros_like(&self) -> Self {
        LayerNorm { gamma: Array1::zeros(self.gamma.len()), beta: Array1::zeros(self.beta.len()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn init(rng: &mut Rng, c: &EncoderConfig) -> Self {
        let d = c.embed_dim;
        Block {
            norm1: LayerNorm::new(d),
            qkv: Linear::init(rng, 3 * d, d),
            attn_out: Linear::init(rng, d, d),
            norm2: LayerNorm::new(d),
            fc1: Linear::init(rng, c.hidden_dim(), d),
            fc2: Linear::init(rng, d, c.hidden_dim()),
        }
    }

    fn zeros_like(&self) -> Self {
        Block {
            norm1: self.norm1.zeros_like(),
            qkv: self.qkv.zeros_like(),
            attn_out: self.attn_out.zeros_like(),
            norm2: self.norm2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }
}

/// Flat view of one tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub layer: usize,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub layer: usize,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn s1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn s2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}
fn m1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}
fn m2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn linear_refs<'a>(out: &mut Vec<TensorRef<'a>>, name: &str, layer: usize, l: &'a Linear) {
    out.push(TensorRef { name: format!("{name}.weight"), layer, shape: l.weight.shape().to_vec(), data: s2(&l.weight) });
    out.push(TensorRef { name: format!("{name}.bias"), layer, shape: vec![l.bias.len()], data: s1(&l.bias) });
}

fn linear_muts<'a>(out: &mut Vec<TensorMut<'a>>, name: &str, layer: usize, l: &'a mut Linear) {
    let shape = l.weight.shape().to_vec();
    out.push(TensorMut { name: format!("{name}.weight"), layer, shape, data: m2(&mut l.weight) });
    let n = l.bias.len();
    out.push(TensorMut { name: format!("{name}.bias"), layer, shape: vec![n], data: m1(&mut l.bias) });
}

fn norm_refs<'a>(out: &mut Vec<TensorRef<'a>>, name: &str, layer: usize, n: &'a LayerNorm) {
    out.push(TensorRef { name: format!("{name}.gamma"), layer, shape: vec![n.gamma.len()], data: s1(&n.gamma) });
    out.push(TensorRef { name: format!("{name}.beta"), layer, shape: vec![n.beta.len()], data: s1(&n.beta) });
}

fn norm_muts<'a>(out: &mut Vec<TensorMut<'a>>, name: &str, layer: usize, n: &'a mut LayerNorm) {
    let d = n.gamma.len();
    out.push(TensorMut { name: format!("{name}.gamma"), layer, shape: vec![d], data: m1(&mut n.gamma) });
    out.push(TensorMut { name: format!("{name}.beta"), layer, shape: vec![d], data: m1(&mut n.beta) });
}

fn pos_ref(p: &Array2<f64>) -> TensorRef<'_> {
    TensorRef { name: "pos_embed".into(), layer: 0, shape: p.shape().to_vec(), data: s2(p) }
}

fn pos_mut(p: &mut Array2<f64>) -> TensorMut<'_> {
    let shape = p.shape().to_vec();
    TensorMut { name: "pos_embed".into(), layer: 0, shape, data: m2(p) }
}

fn block_refs<'a>(out: &mut Vec<TensorRef<'a>>, i: usize, b: &'a Block) {
    let layer = i + 1;
    norm_refs(out, &format!("blocks.{i}.norm1"), layer, &b.norm1);
    linear_refs(out, &format!("blocks.{i}.qkv"), layer, &b.qkv);
    linear_refs(out, &format!("blocks.{i}.attn_out"), layer, &b.attn_out);
    norm_refs(out, &format!("blocks.{i}.norm2"), layer, &b.norm2);
    linear_refs(out, &format!("blocks.{i}.fc1"), layer, &b.fc1);
    linear_refs(out, &format!("blocks.{i}.fc2"), layer, &b.fc2);
}

fn block_muts<'a>(out: &mut Vec<TensorMut<'a>>, i: usize, b: &'a mut Block) {
    let layer = i + 1;
    norm_muts(out, &format!("blocks.{i}.norm1"), layer, &mut b.norm1);
    linear_muts(out, &format!("blocks.{i}.qkv"), layer, &mut b.qkv);
    linear_muts(out, &format!("blocks.{i}.attn_out"), layer, &mut b.attn_out);
    norm_muts(out, &format!("blocks.{i}.norm2"), layer, &mut b.norm2);
    linear_muts(out, &format!("blocks.{i}.fc1"), layer, &mut b.fc1);
    linear_muts(out, &format!("blocks.{i}.fc2"), layer, &mut b.fc2);
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub head: Linear,
    trainable: Vec<bool>,
}

/// Scaled-normal initialization (std `1/sqrt(fan_in)`), zero biases, unit
/// norm gains. Every layer starts trainable.
pub fn init_params(config: &EncoderConfig, rng: &mut Rng) -> Result<EncoderParams> {
    config.validate()?;
    let patch_embed = Linear::init(rng, config.embed_dim, config.patch_dim());
    let pos_embed = Array2::from_shape_simple_fn((config.tokens(), config.embed_dim), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    let blocks = (0..config.n_blocks).map(|_| Block::init(rng, config)).collect();
    let head = Linear::init(rng, config.output_dim, config.embed_dim);
    Ok(EncoderParams { config: *config, patch_embed, pos_embed, blocks, head, trainable: vec![true; config.n_layers()] })
}

/// Initialize from the config's own seed.
pub fn init_from_seed(config: &EncoderConfig) -> Result<EncoderParams> {
    init_params(config, &mut rng::forked_rng(config.seed, "encoder-init"))
}

impl EncoderParams {
    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn is_trainable(&self, layer: usize) -> bool {
        self.trainable[layer]
    }

    pub fn set_trainable(&mut self, layer: usize, on: bool) {
        self.trainable[layer] = on;
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.trainable.iter_mut().for_each(|t| *t = on);
    }

    /// Freeze everything except the last transformer block and the
    /// projection head.
    pub fn set_last_block_only(&mut self) {
        let n = self.config.n_layers();
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = i >= n - 2;
        }
    }

    pub fn layer_name(&self, layer: usize) -> String {
        match layer {
            0 => "patch_embed".into(),
            l if l <= self.config.n_blocks => format!("blocks.{}", l - 1),
            _ => "head".into(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        linear_refs(&mut out, "patch_embed", 0, &self.patch_embed);
        out.push(pos_ref(&self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            block_refs(&mut out, i, b);
        }
        linear_refs(&mut out, "head", self.config.n_blocks + 1, &self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let head_layer = self.config.n_blocks + 1;
        linear_muts(&mut out, "patch_embed", 0, &mut self.patch_embed);
        out.push(pos_mut(&mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            block_muts(&mut out, i, b);
        }
        linear_muts(&mut out, "head", head_layer, &mut self.head);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradients for the trainable layers of one encoder. Frozen layers have no
/// entry at all.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub patch_embed: Option<Linear>,
    pub pos_embed: Option<Array2<f64>>,
    pub blocks: Vec<Option<Block>>,
    pub head: Option<Linear>,
}

impl ParamGrads {
    pub fn zeros_for(params: &EncoderParams) -> Self {
        ParamGrads {
            patch_embed: params.is_trainable(0).then(|| params.patch_embed.zeros_like()),
            pos_embed: params.is_trainable(0).then(|| Array2::zeros(params.pos_embed.raw_dim())),
            blocks: params
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| params.is_trainable(i + 1).then(|| b.zeros_like()))
                .collect(),
            head: params.is_trainable(params.config.n_blocks + 1).then(|| params.head.zeros_like()),
        }
    }

    /// Tensors present, in the same order as [`EncoderParams::tensors`].
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        if let Some(l) = &self.patch_embed {
            linear_refs(&mut out, "patch_embed", 0, l);
        }
        if let Some(p) = &self.pos_embed {
            out.push(pos_ref(p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(b) = b {
                block_refs(&mut out, i, b);
            }
        }
        if let Some(l) = &self.head {
            linear_refs(&mut out, "head", self.blocks.len() + 1, l);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let head_layer = self.blocks.len() + 1;
        if let Some(l) = &mut self.patch_embed {
            linear_muts(&mut out, "patch_embed", 0, l);
        }
        if let Some(p) = &mut self.pos_embed {
            out.push(pos_mut(p));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(b) = b {
                block_muts(&mut out, i, b);
            }
        }
        if let Some(l) = &mut self.head {
            linear_muts(&mut out, "head", head_layer, l);
        }
        out
    }

    /// `self += other`; both must cover the same layers.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape("gradient sets cover different layers".into()));
        }
        for (d, s) in dst.iter_mut().zip(&src) {
            if d.name != s.name || d.data.len() != s.data.len() {
                return Err(Error::Shape(format!("gradient tensor {} vs {}", d.name, s.name)));
            }
            d.data.iter_mut().zip(s.data).for_each(|(a, b)| *a += *b);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Sum a list of gradients in order.
pub fn sum_grads(params: &EncoderParams, grads: &[ParamGrads]) -> Result<ParamGrads> {
    let mut total = ParamGrads::zeros_for(params);
    for g in grads {
        total.accumulate(g)?;
    }
    Ok(total)
}

/// Encoder output: a `d`-dimensional embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}
