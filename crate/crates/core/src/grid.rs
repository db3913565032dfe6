//! Rank-2 grids shared across the pipeline and the resize kernels.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Intensity slice, values in `[0, 1]`.
pub type ImageGrid = Array2<f32>;
/// Class-activation map, nonnegative (normalized maps lie in `[0, 1]`).
pub type CamGrid = Array2<f32>;
/// `{0, 1}` grid used for thresholded CAMs and segmentation labels.
pub type BinaryMask = Array2<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// One output coordinate's bilinear source taps: `(lo, hi, weight_hi)`.
///
/// Aligned-corners convention: output index `i` maps to source coordinate
/// `i * (src - 1) / (dst - 1)`, so the first and last samples coincide.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Dense `dst × src` interpolation matrix for the aligned-corners bilinear map.
pub(crate) fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for (i, (lo, hi, w)) in bilinear_taps(src, dst).into_iter().enumerate() {
        m[i * src + lo] += 1.0 - w;
        m[i * src + hi] += w;
    }
    m
}

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    ((i * src) / dst).min(src - 1)
}

/// Resize a float grid to `target = (rows, cols)`.
pub fn resize_grid(grid: &Array2<f32>, target: (usize, usize), mode: ResizeMode) -> Result<Array2<f32>> {
    let (th, tw) = target;
    if th < 1 || tw < 1 {
        bail!(InvalidArgument, "resize target must be at least 1x1, got {th}x{tw}");
    }
    let (sh, sw) = grid.dim();
    if sh < 1 || sw < 1 {
        bail!(InvalidArgument, "cannot resize an empty {sh}x{sw} grid");
    }
    let out = match mode {
        ResizeMode::Nearest => Array2::from_shape_fn((th, tw), |(i, j)| {
            grid[[nearest_index(i, sh, th), nearest_index(j, sw, tw)]]
        }),
        ResizeMode::Bilinear => {
            let rows = bilinear_taps(sh, th);
            let cols = bilinear_taps(sw, tw);
            Array2::from_shape_fn((th, tw), |(i, j)| {
                let (r0, r1, wr) = rows[i];
                let (c0, c1, wc) = cols[j];
                let top = grid[[r0, c0]] as f64 * (1.0 - wc) + grid[[r0, c1]] as f64 * wc;
                let bot = grid[[r1, c0]] as f64 * (1.0 - wc) + grid[[r1, c1]] as f64 * wc;
                (top * (1.0 - wr) + bot * wr) as f32
            })
        }
    };
    Ok(out)
}

/// Nearest-neighbour resize for masks; preserves the `{0, 1}` value set.
pub fn resize_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (th, tw) = target;
    if th < 1 || tw < 1 {
        bail!(InvalidArgument, "resize target must be at least 1x1, got {th}x{tw}");
    }
    let (sh, sw) = mask.dim();
    if sh < 1 || sw < 1 {
        bail!(InvalidArgument, "cannot resize an empty {sh}x{sw} mask");
    }
    Ok(Array2::from_shape_fn((th, tw), |(i, j)| {
        mask[[nearest_index(i, sh, th), nearest_index(j, sw, tw)]]
    }))
}

/// Foreground pixels with at least one 4-neighbour outside the mask.
/// Pixels on the image border count as touching background.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if mask[[y, x]] == 0 {
            return 0;
        }
        let edge = y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || mask[[y - 1, x]] == 0
            || mask[[y + 1, x]] == 0
            || mask[[y, x - 1]] == 0
            || mask[[y, x + 1]] == 0;
        u8::from(edge)
    })
}

pub fn binarize(grid: &Array2<f32>, threshold: f32) -> BinaryMask {
    grid.mapv(|v| u8::from(v >= threshold))
}
