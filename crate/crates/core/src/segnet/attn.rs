use candle_core::Tensor;

use super::lora::{lora_apply, LoraAdapter};

use crate::error::Result;
use crate::nn;
use crate::params::ParamStore;

/// One projection of an attention block, routed through its LoRA adapter when
/// `lora_scale` is set and the store holds one for it.
pub(super) fn project(store: &ParamStore, name: &str, x: &Tensor, lora_scale: Option<f64>) -> Result<Tensor> {
    let w = store.get(&format!("{name}.w"))?;
    let b = store.get(&format!("{name}.b"))?;
    let a_name = format!("{name}.lora_a");
    let y = if let (Some(scale), true) = (lora_scale, store.contains(&a_name)) {
        let adapter = LoraAdapter::new(store.get(&a_name)?.clone(), store.get(&format!("{name}.lora_b"))?.clone(), scale)?;
        lora_apply(x, w, &adapter)?
    } else {
        nn::linear(x, w, None)?
    };
    Ok(y.broadcast_add(b)?)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Multi-head attention over `(B, N, d)` queries and `(B, M, d)` keys/values.
pub(super) fn attention(store: &ParamStore, name: &str, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, lora_scale: Option<f64>) -> Result<Tensor> {
    let (b, n, d) = q.dims3()?;
    let qh = split_heads(&project(store, &format!("{name}.q"), q, lora_scale)?, heads)?;
    let kh = split_heads(&project(store, &format!("{name}.k"), k, lora_scale)?, heads)?;
    let vh = split_heads(&project(store, &format!("{name}.v"), v, lora_scale)?, heads)?;
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let scores = (qh.matmul(&kh.t()?.contiguous()?)? * scale)?;
    let p = nn::softmax_last(&scores)?;
    let out = p.matmul(&vh)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
    project(store, &format!("{name}.o"), &out, lora_scale)
}

pub(super) fn layer_norm(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    nn::layer_norm(x, store.get(&format!("{name}.g"))?, store.get(&format!("{name}.b"))?, 1e-5)
}

pub(super) fn mlp(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let h = nn::linear(x, store.get(&format!("{name}.fc1.w"))?, Some(store.get(&format!("{name}.fc1.b"))?))?;
    nn::linear(&h.gelu()?, store.get(&format!("{name}.fc2.w"))?, Some(store.get(&format!("{name}.fc2.b"))?))
}

pub(super) fn mlp_relu(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let h = nn::linear(x, store.get(&format!("{name}.fc1.w"))?, Some(store.get(&format!("{name}.fc1.b"))?))?;
    nn::linear(&h.relu()?, store.get(&format!("{name}.fc2.w"))?, Some(store.get(&format!("{name}.fc2.b"))?))
}

