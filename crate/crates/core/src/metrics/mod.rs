//! Segmentation evaluation: Dice, Hausdorff distance, multi-run aggregation,
//! report export and overlay rendering.

mod distance;
mod overlay;
mod report;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::{boundary, BinaryMask};

pub use distance::squared_edt;
pub use overlay::{overlay_rgb, render_overlay, GT_TINT, PRED_CONTOUR};
pub use report::{
    aggregate_runs, export_report, format_mean_std, quartiles, Aggregate, Domain, EvalReport, MeanStd, SampleEval,
    BOXPLOT_HEADER, PER_SAMPLE_HEADER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct MetricsConfig {
    /// Directed-distance percentile for HD; `None` is the maximum.
    pub hd_percentile: Option<f64>,
    /// Score organ-free slices too (both-empty counts as Dice 1, HD 0).
    pub include_negatives: bool,
}


/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a != 0, b != 0);
        inter += u64::from(a && b);
        p += u64::from(a);
        g += u64::from(b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dim() != b.dim() {
        bail!(ShapeMismatch, "mask shapes differ: {:?} vs {:?}", a.dim(), b.dim());
    }
    Ok(())
}

/// Distances from each boundary pixel of `from` to the nearest boundary
/// pixel of `to` (`to_edt` is the squared EDT of that boundary).
fn directed(from: &BinaryMask, to_edt: &Array2<f64>) -> Vec<f64> {
    from.iter()
        .zip(to_edt.iter())
        .filter(|(&b, _)| b != 0)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Symmetric boundary Hausdorff distance in pixels, or `None` when either
/// mask is empty. `percentile` in `(0, 100]` replaces each directed maximum
/// with that percentile (linear interpolation); `None` is the plain maximum.
pub fn hausdorff_distance(pred: &BinaryMask, gt: &BinaryMask, percentile: Option<f64>) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    if let Some(p) = percentile {
        if !(p > 0.0 && p <= 100.0) {
            bail!(InvalidArgument, "hd percentile must be in (0, 100], got {p}");
        }
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    if !bp.iter().any(|&v| v != 0) || !bg.iter().any(|&v| v != 0) {
        return Ok(None);
    }
    let d_pg = directed(&bp, &squared_edt(&bg));
    let d_gp = directed(&bg, &squared_edt(&bp));
    let reduce = |mut d: Vec<f64>| match percentile {
        None => d.into_iter().fold(0.0, f64::max),
        Some(p) => {
            d.sort_by(f64::total_cmp);
            quantile_sorted(&d, p / 100.0)
        }
    };
    Ok(Some(reduce(d_pg).max(reduce(d_gp))))
}

/// Linear-interpolation quantile (`h = (n-1)q`) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Metrics for one prediction; HD is `None` when exactly one mask is empty.
pub fn evaluate_pair(id: &str, pred: &BinaryMask, gt: &BinaryMask, percentile: Option<f64>) -> Result<SampleEval> {
    let dice = dice_score(pred, gt)?;
    let p_empty = !pred.iter().any(|&v| v != 0);
    let g_empty = !gt.iter().any(|&v| v != 0);
    let hausdorff_px = if p_empty && g_empty { Some(0.0) } else { hausdorff_distance(pred, gt, percentile)? };
    Ok(SampleEval {
        id: id.to_string(),
        dice,
        hausdorff_px,
    })
}
