use candle_core::Tensor;

use super::attn::{attention, layer_norm, mlp_relu};
use super::prompt::dense_pe;
use super::{SegnetConfig, DECODER_PREFIX};
use crate::error::{bail, Result};
use crate::nn;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `(K, H, W)` pre-sigmoid.
    pub logits: Tensor,
    /// `(K, H, W)` probabilities.
    pub masks: Tensor,
    /// `(K,)` predicted mask quality in `[0, 1]`.
    pub scores: Tensor,
}

/// Two-way attention decoder for a single image.
///
/// `dense` is `(N, d)`, `sparse` is `(T, d)` and `image` is the `(1, 1, H, W)`
/// input the embeddings were computed from.
pub fn mask_decode(cfg: &SegnetConfig, store: &ParamStore, dense: &Tensor, sparse: &Tensor, image: &Tensor) -> Result<DecoderOutput> {
    let d = cfg.dim;
    let k = cfg.num_masks;
    let (n, dd) = dense.dims2()?;
    if n != cfg.num_tokens() || dd != d || sparse.dims2()?.1 != d {
        bail!(ShapeMismatch, "decoder got dense {:?} and sparse {:?}", dense.dims(), sparse.dims());
    }
    let (_, _, h, w) = image.dims4()?;
    let dp = DECODER_PREFIX;
    let heads = cfg.decoder_heads;

    let tokens = Tensor::cat(&[store.get(&format!("{dp}iou_token"))?, store.get(&format!("{dp}mask_tokens"))?, sparse], 0)?.unsqueeze(0)?;
    let key_pe = dense_pe(cfg, store)?.unsqueeze(0)?;
    let mut queries = tokens.clone();
    let mut keys = dense.unsqueeze(0)?;

    for l in 0..cfg.decoder_depth {
        let b = format!("{dp}layer{l}");
        queries = if l == 0 {
            attention(store, &format!("{b}.self"), &queries, &queries, &queries, heads, None)?
        } else {
            let q = (&queries + &tokens)?;
            (&queries + attention(store, &format!("{b}.self"), &q, &q, &queries, heads, None)?)?
        };
        queries = layer_norm(store, &format!("{b}.ln1"), &queries)?;

        let q = (&queries + &tokens)?;
        let kk = (&keys + &key_pe)?;
        queries = (&queries + attention(store, &format!("{b}.t2i"), &q, &kk, &keys, heads, None)?)?;
        queries = layer_norm(store, &format!("{b}.ln2"), &queries)?;

        queries = (&queries + mlp_relu(store, &format!("{b}.mlp"), &queries)?)?;
        queries = layer_norm(store, &format!("{b}.ln3"), &queries)?;

        let q = (&queries + &tokens)?;
        let kk = (&keys + &key_pe)?;
        keys = (&keys + attention(store, &format!("{b}.i2t"), &kk, &q, &queries, heads, None)?)?;
        keys = layer_norm(store, &format!("{b}.ln4"), &keys)?;
    }
    let q = (&queries + &tokens)?;
    let kk = (&keys + &key_pe)?;
    queries = (&queries + attention(store, &format!("{dp}final"), &q, &kk, &keys, heads, None)?)?;
    queries = layer_norm(store, &format!("{dp}ln_final"), &queries)?.squeeze(0)?;

    let (gh, gw) = cfg.grid();
    let grid = keys.squeeze(0)?.t()?.contiguous()?.reshape((1, d, gh, gw))?;
    let up = nn::conv_transpose2d(&grid, store.get(&format!("{dp}up1.w"))?, store.get(&format!("{dp}up1.b"))?, 2)?.gelu()?;
    let up = nn::conv_transpose2d(&up, store.get(&format!("{dp}up2.w"))?, store.get(&format!("{dp}up2.b"))?, 2)?;
    let mut feat = nn::resize_bilinear(&up, (h, w))?;
    if cfg.image_skip {
        let skip = nn::conv2d(&nn::pad_replicate(image, 1)?, store.get(&format!("{dp}skip.w"))?, store.get(&format!("{dp}skip.b"))?, 0, 1)?;
        feat = (feat + skip)?;
    }
    let feat = feat.gelu()?;
    let c = cfg.upscale_channels;
    let feat = feat.reshape((c, h * w))?;

    let mut hyper = Vec::with_capacity(k);
    for m in 0..k {
        let tok = queries.narrow(0, 1 + m, 1)?;
        hyper.push(mlp_relu(store, &format!("{dp}hyper{m}"), &tok)?);
    }
    let hyper = Tensor::cat(&hyper, 0)?;
    let logits = hyper.matmul(&feat)?.reshape((k, h, w))?;
    let masks = nn::sigmoid(&logits)?;
    let iou = mlp_relu(store, &format!("{dp}iou"), &queries.narrow(0, 0, 1)?)?.squeeze(0)?;
    let scores = nn::sigmoid(&iou)?;
    Ok(DecoderOutput { logits, masks, scores })
}
