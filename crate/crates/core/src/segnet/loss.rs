use candle_core::Tensor;
use ndarray::Array2;

use crate::error::{bail, Result};
use crate::grid::BinaryMask;

pub const DICE_EPS: f64 = 1e-6;

/// Soft Dice loss `1 - (2Σpg + ε) / (Σp + Σg + ε)` on host grids.
pub fn dice_loss(pred: &Array2<f32>, gt: &BinaryMask) -> Result<f64> {
    if pred.dim() != gt.dim() {
        bail!(ShapeMismatch, "dice_loss: prediction {:?} vs target {:?}", pred.dim(), gt.dim());
    }
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let g = f64::from(g.min(1));
        inter += p as f64 * g;
        sp += p as f64;
        sg += g;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

/// Soft Dice loss per mask for `(K, H, W)` probabilities against an
/// `(H, W)` target; returns `(K,)`.
pub fn dice_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (k, h, w) = pred.dims3()?;
    let p = pred.reshape((k, h * w))?;
    let g = gt.reshape((1, h * w))?.to_dtype(pred.dtype())?;
    let inter = p.broadcast_mul(&g)?.sum(1)?;
    let denom = (p.sum(1)?.broadcast_add(&g.sum(1)?)? + DICE_EPS)?;
    let ratio = ((inter * 2.0)? + DICE_EPS)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}
