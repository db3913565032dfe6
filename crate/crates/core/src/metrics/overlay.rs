use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{bail, Result};
use crate::grid::{boundary, BinaryMask, ImageGrid};

pub const GT_TINT: [u8; 3] = [0, 255, 0];
pub const PRED_CONTOUR: [u8; 3] = [255, 0, 0];
const TINT_ALPHA: f32 = 0.4;

/// Grayscale image with the ground truth tinted green and the boundary of
/// the prediction drawn in red on top.
pub fn overlay_rgb(image: &ImageGrid, gt: &BinaryMask, pred: &BinaryMask) -> Result<RgbImage> {
    if image.dim() != gt.dim() || image.dim() != pred.dim() {
        bail!(ShapeMismatch, "overlay inputs differ: image {:?}, gt {:?}, pred {:?}", image.dim(), gt.dim(), pred.dim());
    }
    let (h, w) = image.dim();
    let contour = boundary(pred);
    let mut out = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in image.indexed_iter() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round();
        let px = if contour[[y, x]] != 0 {
            PRED_CONTOUR
        } else if gt[[y, x]] != 0 {
            GT_TINT.map(|c| ((1.0 - TINT_ALPHA) * g + TINT_ALPHA * c as f32).round() as u8)
        } else {
            [g as u8; 3]
        };
        out.put_pixel(x as u32, y as u32, Rgb(px));
    }
    Ok(out)
}

pub fn render_overlay(image: &ImageGrid, gt: &BinaryMask, pred: &BinaryMask, out: &Path) -> Result<()> {
    let rgb = overlay_rgb(image, gt, pred)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    rgb.save_with_format(out, image::ImageFormat::Png)?;
    Ok(())
}
