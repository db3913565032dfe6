use std::f64::consts::PI;

use candle_core::Tensor;

use super::{SegnetConfig, PROMPT_PREFIX};
use crate::error::{bail, Result};
use crate::nn;
use crate::params::ParamStore;

/// Random Fourier features of normalized `(x, y)` points: `[sin 2πv, cos 2πv]`
/// with `v = (2p - 1)·G`, where `G` is the `2 × d/2` frequency matrix.
pub fn fourier_encode(points: &[[f64; 2]], gaussian: &Tensor) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flat_map(|p| [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0]).collect();
    let pts = nn::constant(flat, &[points.len(), 2], gaussian.dtype())?;
    let v = (pts.matmul(gaussian)? * (2.0 * PI))?;
    Ok(Tensor::cat(&[v.sin()?, v.cos()?], 1)?)
}

/// Sparse tokens `(T, d)` for normalized boxes `[x_min, y_min, x_max, y_max]`:
/// two corner tokens per box, or the learned no-prompt token when there is
/// no box.
pub fn prompt_encode(cfg: &SegnetConfig, store: &ParamStore, coords: &[[f64; 4]]) -> Result<Tensor> {
    let p = PROMPT_PREFIX;
    if coords.is_empty() {
        return Ok(store.get(&format!("{p}no_prompt"))?.clone());
    }
    for c in coords {
        if c.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) || c[0] > c[2] || c[1] > c[3] {
            bail!(InvalidArgument, "box prompt {c:?} is not a normalized box");
        }
    }
    let mut pts = Vec::with_capacity(coords.len() * 2);
    for c in coords {
        pts.push([c[0], c[1]]);
        pts.push([c[2], c[3]]);
    }
    let pe = fourier_encode(&pts, store.get(&format!("{p}gaussian"))?)?;
    let corners = Tensor::cat(&[store.get(&format!("{p}corner_tl"))?, store.get(&format!("{p}corner_br"))?], 0)?;
    let corners = corners.repeat((coords.len(), 1))?;
    debug_assert_eq!(pe.dims()[1], cfg.dim);
    Ok((pe + corners)?)
}

/// Positional encoding `(N, d)` of the patch-grid cell centres.
pub(super) fn dense_pe(cfg: &SegnetConfig, store: &ParamStore) -> Result<Tensor> {
    let (gh, gw) = cfg.grid();
    let pts: Vec<[f64; 2]> = (0..gh)
        .flat_map(|i| (0..gw).map(move |j| [(j as f64 + 0.5) / gw as f64, (i as f64 + 0.5) / gh as f64]))
        .collect();
    fourier_encode(&pts, store.get(&format!("{PROMPT_PREFIX}gaussian"))?)
}

