use std::ops::Range;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{bail, Error, Result};
use crate::grid::{resize_grid, resize_mask, BinaryMask, ResizeMode};

/// A CT-like volume in Hounsfield units, stored slice-major (S×H×W).
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub voxels: Array3<f32>,
    /// Voxel spacing in millimetres (slice, row, column).
    pub spacing: [f64; 3],
}

impl RawVolume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let volume = Self { voxels, spacing };
        volume.validate()?;
        Ok(volume)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, h, w) = self.voxels.dim();
        if s < 1 || h < 8 || w < 8 {
            bail!(DataIntegrity, "volume must be at least 1x8x8, got {s}x{h}x{w}");
        }
        if self.spacing.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            bail!(DataIntegrity, "voxel spacing must be positive, got {:?}", self.spacing);
        }
        if let Some(pos) = self.voxels.iter().position(|v| !v.is_finite()) {
            bail!(DataIntegrity, "non-finite voxel at flat index {pos}");
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.len_of(Axis(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub window_width: f64,
    pub window_center: f64,
    pub slice_fraction: f64,
    pub image_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_width: 400.0,
            window_center: 40.0,
            slice_fraction: 0.3,
            image_size: 256,
        }
    }
}

/// Map HU linearly so `[center - width/2, center + width/2]` lands on `[0, 1]`,
/// clamping outside the window.
pub fn window_level(volume: &RawVolume, width: f64, center: f64) -> Result<RawVolume> {
    if !(width.is_finite() && width > 0.0) || !center.is_finite() {
        bail!(InvalidArgument, "window width must be positive and finite (width={width}, center={center})");
    }
    if let Some(pos) = volume.voxels.iter().position(|v| !v.is_finite()) {
        bail!(DataIntegrity, "non-finite voxel at flat index {pos}; volume rejected");
    }
    let low = center - width / 2.0;
    let voxels = volume
        .voxels
        .mapv(|v| ((v as f64 - low) / width).clamp(0.0, 1.0) as f32);
    Ok(RawVolume {
        voxels,
        spacing: volume.spacing,
    })
}

/// Centered contiguous window holding `round(S * fraction)` slices.
///
/// The left margin is `ceil((S - count) / 2)`, so left minus right margin is
/// always 0 or 1.
pub fn extract_middle_slices(num_slices: usize, fraction: f64) -> Result<Range<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(InvalidArgument, "slice fraction must lie in (0, 1], got {fraction}");
    }
    let count = ((num_slices as f64 * fraction) + 1e-9).round() as usize;
    let count = count.min(num_slices);
    if count == 0 {
        return Err(Error::VolumeTooShort {
            slices: num_slices,
            fraction,
        });
    }
    let start = (num_slices - count).div_ceil(2);
    Ok(start..start + count)
}

pub fn derive_class_label(mask: &BinaryMask) -> u8 {
    mask.iter().copied().max().unwrap_or(0).min(1)
}

/// Window, slice-select and resize one volume into 2D samples.
///
/// Sample ids are `{prefix}_s{index:03}` with the index into the original
/// volume. Labels are derived after resizing so they always agree with the
/// stored mask.
pub fn volume_to_samples(
    volume: &RawVolume,
    labels: Option<&Array3<u8>>,
    cfg: &PreprocessConfig,
    prefix: &str,
) -> Result<Vec<Sample>> {
    if let Some(labels) = labels {
        if labels.dim() != volume.voxels.dim() {
            bail!(
                ShapeMismatch,
                "label volume {:?} does not match image volume {:?}",
                labels.dim(),
                volume.voxels.dim()
            );
        }
    }
    let windowed = window_level(volume, cfg.window_width, cfg.window_center)?;
    let target = (cfg.image_size, cfg.image_size);
    extract_middle_slices(volume.num_slices(), cfg.slice_fraction)?
        .map(|s| {
            let image = resize_grid(&windowed.voxels.index_axis(Axis(0), s).to_owned(), target, ResizeMode::Bilinear)?
                .mapv(|v| v.clamp(0.0, 1.0));
            let seg_label = labels
                .map(|l| resize_mask(&l.index_axis(Axis(0), s).mapv(|v| v.min(1)), target))
                .transpose()?;
            let cls_label = seg_label.as_ref().map(derive_class_label).unwrap_or(0);
            Ok(Sample {
                id: format!("{prefix}_s{s:03}"),
                image,
                seg_label,
                cls_label,
            })
        })
        .collect()
}
