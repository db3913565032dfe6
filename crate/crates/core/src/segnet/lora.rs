use candle_core::Tensor;

use crate::error::{bail, Result};
use crate::nn;

/// Low-rank additive update `ΔW = scale · B·A` for a frozen `d × d` projection.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `r × d`
    pub a: Tensor,
    /// `d × r`
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let (r, d) = a.dims2()?;
        let (d2, r2) = b.dims2()?;
        if d != d2 || r != r2 {
            bail!(ShapeMismatch, "LoRA factors A {:?} and B {:?} are inconsistent", a.dims(), b.dims());
        }
        if r == 0 || r > d {
            bail!(Config, "LoRA rank must satisfy 1 <= r <= d (r={r}, d={d})");
        }
        Ok(Self { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.a.dims()[1]
    }

    /// Scalars the adapter trains: `2·r·d`.
    pub fn trainable_params(&self) -> usize {
        2 * self.rank() * self.dim()
    }

    /// The dense `d × d` update it represents.
    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.b.matmul(&self.a)? * self.scale)?)
    }
}

/// `W_base·x + scale·B·(A·x)` applied along the last axis of `x`.
pub fn lora_apply(x: &Tensor, w_base: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (rows, cols) = w_base.dims2()?;
    let d_in = *x.dims().last().unwrap_or(&0);
    if cols != d_in || adapter.dim() != d_in || rows != adapter.b.dims()[0] {
        bail!(
            ShapeMismatch,
            "lora_apply: x has width {d_in}, base is {rows}x{cols}, adapter is d={}",
            adapter.dim()
        );
    }
    let base = nn::linear(x, w_base, None)?;
    let low = nn::linear(&nn::linear(x, &adapter.a, None)?, &adapter.b, None)?;
    Ok((base + (low * adapter.scale)?)?)
}
