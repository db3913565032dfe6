//! Miniature promptable segmenter.
//!
//! A patch-embedding transformer encoder (frozen, with LoRA adapters on the
//! chosen attention projections) produces dense embeddings; a box prompt
//! encoder produces sparse corner tokens; a two-way attention decoder emits
//! `K` masks with confidence scores.

mod attn;
mod decoder;
mod encoder;
mod lora;
mod loss;
mod prompt;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::ImageGrid;
use crate::nn;
use crate::params::ParamStore;

pub use decoder::{mask_decode, DecoderOutput};
pub use encoder::{image_encode, image_encode_base};
pub use lora::{lora_apply, LoraAdapter};
pub use loss::{dice_loss, dice_loss_tensor, DICE_EPS};
pub use prompt::{fourier_encode, prompt_encode};

pub const PREFIX: &str = "seg.";
pub const ENCODER_PREFIX: &str = "seg.enc.";
pub const PROMPT_PREFIX: &str = "seg.prompt.";
pub const DECODER_PREFIX: &str = "seg.dec.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    Out,
}

impl Projection {
    pub fn key(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::Out => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegnetConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_init_std: f64,
    pub lora_targets: Vec<Projection>,
    pub num_masks: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub upscale_channels: usize,
    /// Std of the random Fourier frequency matrix shared by box corners and
    /// the dense positional encoding.
    pub pe_scale: f64,
    /// Full-resolution conv path from the input image into the mask features.
    pub image_skip: bool,
}

impl Default for SegnetConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            lora_rank: 8,
            lora_scale: 1.0,
            lora_init_std: 0.02,
            lora_targets: vec![Projection::Q, Projection::V],
            num_masks: 3,
            decoder_depth: 2,
            decoder_heads: 4,
            upscale_channels: 8,
            pe_scale: 1.0,
            image_skip: true,
        }
    }
}

impl SegnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            bail!(Config, "image size {} is not divisible by patch size {}", self.image_size, self.patch_size);
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) || !self.dim.is_multiple_of(2) {
            bail!(Config, "embedding dim must be a positive multiple of 4, got {}", self.dim);
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || self.decoder_heads == 0 || !self.dim.is_multiple_of(self.decoder_heads) {
            bail!(Config, "attention heads must divide dim {}", self.dim);
        }
        if self.lora_rank == 0 || self.lora_rank > self.dim {
            bail!(Config, "LoRA rank must satisfy 1 <= r <= d (r={}, d={})", self.lora_rank, self.dim);
        }
        if self.num_masks == 0 || self.upscale_channels == 0 || self.mlp_ratio == 0 {
            bail!(Config, "num_masks, upscale_channels and mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

fn linear_params(store: &mut ParamStore, name: &str, out: usize, inp: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert_normal(&format!("{name}.w"), &[out, inp], (1.0 / inp as f64).sqrt(), trainable, rng)?;
    store.insert_const(&format!("{name}.b"), &[out], 0.0, trainable)
}

fn layer_norm_params(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Result<()> {
    store.insert_const(&format!("{name}.g"), &[dim], 1.0, trainable)?;
    store.insert_const(&format!("{name}.b"), &[dim], 0.0, trainable)
}

fn attention_params(store: &mut ParamStore, name: &str, dim: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        linear_params(store, &format!("{name}.{p}"), dim, dim, trainable, rng)?;
    }
    Ok(())
}

/// Register all segmenter parameters. The encoder base is frozen; LoRA
/// factors, prompt embeddings and the decoder are trainable (the Fourier
/// frequency matrix is a fixed buffer). LoRA `B` starts at zero, so the
/// adapted encoder equals the frozen base at initialization.
pub fn init_params(cfg: &SegnetConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    let p = cfg.patch_size;
    let e = ENCODER_PREFIX;
    store.insert_normal(&format!("{e}patch.w"), &[d, 1, p, p], 1.0 / p as f64, false, rng)?;
    store.insert_const(&format!("{e}patch.b"), &[d], 0.0, false)?;
    store.insert_normal(&format!("{e}pos"), &[cfg.num_tokens(), d], 0.02, false, rng)?;
    for i in 0..cfg.depth {
        let b = format!("{e}block{i}");
        layer_norm_params(store, &format!("{b}.ln1"), d, false)?;
        attention_params(store, &format!("{b}.attn"), d, false, rng)?;
        for proj in &cfg.lora_targets {
            let n = format!("{b}.attn.{}", proj.key());
            store.insert_normal(&format!("{n}.lora_a"), &[cfg.lora_rank, d], cfg.lora_init_std, true, rng)?;
            store.insert_const(&format!("{n}.lora_b"), &[d, cfg.lora_rank], 0.0, true)?;
        }
        layer_norm_params(store, &format!("{b}.ln2"), d, false)?;
        linear_params(store, &format!("{b}.mlp.fc1"), cfg.mlp_ratio * d, d, false, rng)?;
        linear_params(store, &format!("{b}.mlp.fc2"), d, cfg.mlp_ratio * d, false, rng)?;
    }
    layer_norm_params(store, &format!("{e}ln_out"), d, false)?;

    let pp = PROMPT_PREFIX;
    store.insert_normal(&format!("{pp}gaussian"), &[2, d / 2], cfg.pe_scale, false, rng)?;
    for n in ["corner_tl", "corner_br", "no_prompt"] {
        store.insert_normal(&format!("{pp}{n}"), &[1, d], 1.0, true, rng)?;
    }

    let dp = DECODER_PREFIX;
    let k = cfg.num_masks;
    let c_up = cfg.upscale_channels;
    store.insert_normal(&format!("{dp}iou_token"), &[1, d], 1.0, true, rng)?;
    store.insert_normal(&format!("{dp}mask_tokens"), &[k, d], 1.0, true, rng)?;
    for l in 0..cfg.decoder_depth {
        let b = format!("{dp}layer{l}");
        attention_params(store, &format!("{b}.self"), d, true, rng)?;
        layer_norm_params(store, &format!("{b}.ln1"), d, true)?;
        attention_params(store, &format!("{b}.t2i"), d, true, rng)?;
        layer_norm_params(store, &format!("{b}.ln2"), d, true)?;
        linear_params(store, &format!("{b}.mlp.fc1"), 2 * d, d, true, rng)?;
        linear_params(store, &format!("{b}.mlp.fc2"), d, 2 * d, true, rng)?;
        layer_norm_params(store, &format!("{b}.ln3"), d, true)?;
        attention_params(store, &format!("{b}.i2t"), d, true, rng)?;
        layer_norm_params(store, &format!("{b}.ln4"), d, true)?;
    }
    attention_params(store, &format!("{dp}final"), d, true, rng)?;
    layer_norm_params(store, &format!("{dp}ln_final"), d, true)?;
    let mid = (d / 4).max(1);
    store.insert_normal(&format!("{dp}up1.w"), &[d, mid, 2, 2], (1.0 / d as f64).sqrt(), true, rng)?;
    store.insert_const(&format!("{dp}up1.b"), &[mid], 0.0, true)?;
    store.insert_normal(&format!("{dp}up2.w"), &[mid, c_up, 2, 2], (1.0 / mid as f64).sqrt(), true, rng)?;
    store.insert_const(&format!("{dp}up2.b"), &[c_up], 0.0, true)?;
    if cfg.image_skip {
        store.insert_normal(&format!("{dp}skip.w"), &[c_up, 1, 3, 3], (2.0f64 / 9.0).sqrt(), true, rng)?;
        store.insert_const(&format!("{dp}skip.b"), &[c_up], 0.0, true)?;
    }
    for m in 0..k {
        linear_params(store, &format!("{dp}hyper{m}.fc1"), d, d, true, rng)?;
        linear_params(store, &format!("{dp}hyper{m}.fc2"), c_up, d, true, rng)?;
    }
    linear_params(store, &format!("{dp}iou.fc1"), d, d, true, rng)?;
    linear_params(store, &format!("{dp}iou.fc2"), k, d, true, rng)?;
    Ok(())
}

/// Host-side view of a decoder result.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    /// `K` per-pixel probabilities in `[0, 1]`.
    pub masks: Vec<Array2<f32>>,
    pub scores: Vec<f32>,
}

impl SegPrediction {
    pub fn from_output(out: &DecoderOutput) -> Result<Self> {
        let (k, h, w) = out.masks.dims3()?;
        let values = nn::to_host(&out.masks)?;
        let masks = values
            .chunks(h * w)
            .map(|c| Array2::from_shape_vec((h, w), c.iter().map(|&v| v as f32).collect()).expect("chunk size"))
            .collect();
        let scores = nn::to_host(&out.scores)?.into_iter().map(|v| v as f32).collect();
        debug_assert_eq!(k, out.scores.dims1()?);
        Ok(Self { masks, scores })
    }
}

/// Highest-scoring mask; ties go to the lowest index.
pub fn select_best_mask(pred: &SegPrediction) -> Result<(usize, &Array2<f32>, f32)> {
    if pred.masks.is_empty() || pred.masks.len() != pred.scores.len() {
        bail!(InvalidArgument, "prediction needs K >= 1 masks with one score each");
    }
    let mut best = 0;
    for (i, &s) in pred.scores.iter().enumerate() {
        if s > pred.scores[best] {
            best = i;
        }
    }
    Ok((best, &pred.masks[best], pred.scores[best]))
}

/// Encode one image and decode it against the given normalized boxes.
pub fn segment(cfg: &SegnetConfig, store: &ParamStore, image: &ImageGrid, coords: &[[f64; 4]]) -> Result<SegPrediction> {
    let images = crate::classifier::image_tensor(&[image], store.dtype())?;
    let dense = image_encode(cfg, store, &images)?;
    let sparse = prompt_encode(cfg, store, coords)?;
    let out = mask_decode(cfg, store, &dense.get(0)?, &sparse, &images)?;
    SegPrediction::from_output(&out)
}

/// Trainable parameter breakdown: `(lora, prompt encoder, decoder)`.
pub fn trainable_breakdown(store: &ParamStore) -> (usize, usize, usize) {
    (
        store.trainable_count(ENCODER_PREFIX),
        store.trainable_count(PROMPT_PREFIX),
        store.trainable_count(DECODER_PREFIX),
    )
}
