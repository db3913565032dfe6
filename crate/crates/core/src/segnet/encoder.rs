use candle_core::Tensor;

use super::attn::{attention, layer_norm, mlp};
use super::{SegnetConfig, ENCODER_PREFIX};
use crate::error::{bail, Result};
use crate::nn;
use crate::params::ParamStore;

fn encode(cfg: &SegnetConfig, store: &ParamStore, images: &Tensor, lora: bool) -> Result<Tensor> {
    let (_, c, h, w) = images.dims4()?;
    if c != 1 || h != cfg.image_size || w != cfg.image_size {
        bail!(ShapeMismatch, "encoder expects (B, 1, {s}, {s}), got {:?}", images.dims(), s = cfg.image_size);
    }
    let e = ENCODER_PREFIX;
    let patches = nn::conv2d(
        images,
        store.get(&format!("{e}patch.w"))?,
        store.get(&format!("{e}patch.b"))?,
        0,
        cfg.patch_size,
    )?;
    // (B, d, g, g) -> (B, g·g, d), row-major over the patch grid
    let (b, d, gh, gw) = patches.dims4()?;
    let tokens = patches.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?;
    let mut x = tokens.broadcast_add(store.get(&format!("{e}pos"))?)?;
    let scale = lora.then_some(cfg.lora_scale);
    for i in 0..cfg.depth {
        let blk = format!("{e}block{i}");
        let hn = layer_norm(store, &format!("{blk}.ln1"), &x)?;
        x = (x + attention(store, &format!("{blk}.attn"), &hn, &hn, &hn, cfg.heads, scale)?)?;
        let hn = layer_norm(store, &format!("{blk}.ln2"), &x)?;
        x = (x + mlp(store, &format!("{blk}.mlp"), &hn)?)?;
    }
    layer_norm(store, &format!("{e}ln_out"), &x)
}

/// Dense embeddings `(B, N, d)` for a `(B, 1, H, W)` image batch, with the
/// LoRA adapters applied.
pub fn image_encode(cfg: &SegnetConfig, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    encode(cfg, store, images, true)
}

/// Same encoder with every adapter bypassed.
pub fn image_encode_base(cfg: &SegnetConfig, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    encode(cfg, store, images, false)
}
