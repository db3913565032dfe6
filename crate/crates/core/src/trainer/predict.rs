use ndarray::Array2;
use serde::Serialize;

use super::config::InferenceConfig;
use super::model::Model;
use super::step::POSITIVE_CLASS;
use crate::classifier::{classifier_forward, compute_cam, fc_weights};
use crate::error::{bail, Result};
use crate::grid::{binarize, BinaryMask, CamGrid, ImageGrid};
use crate::promptgen::{boxes_to_prompt_coords, cam_to_boxes, BoxPrompt};
use crate::segnet::{segment, select_best_mask};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub logits: [f64; 2],
    pub predicted_class: u8,
    #[serde(skip)]
    pub cam: CamGrid,
    pub boxes: Vec<BoxPrompt>,
    /// Mask scores of each decode (one decode, or one per box).
    pub scores: Vec<Vec<f32>>,
    /// Index of the selected mask in each decode.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: BinaryMask,
    pub diagnostics: Diagnostics,
}

/// Full inference pipeline for one image. A negative classification or an
/// empty box set gives an all-zero mask; diagnostics are always filled in.
pub fn predict(model: &Model, image: &ImageGrid, cfg: &InferenceConfig) -> Result<Prediction> {
    let size = model.image_size();
    if image.dim() != size {
        bail!(ShapeMismatch, "model expects {:?} images, got {:?}", size, image.dim());
    }
    let out = classifier_forward(image, &model.classifier, &model.store)?;
    let cam = compute_cam(&out.f_last, &fc_weights(&model.store)?, POSITIVE_CLASS, size)?;
    let predicted_class = out.predicted_class();
    let mut diagnostics = Diagnostics {
        logits: out.logits,
        predicted_class,
        boxes: Vec::new(),
        scores: Vec::new(),
        selected: Vec::new(),
        cam,
    };
    let mut mask = Array2::zeros(size);
    if predicted_class == 0 {
        return Ok(Prediction { mask, diagnostics });
    }
    diagnostics.boxes = cam_to_boxes(&diagnostics.cam, &model.threshold)?;
    if diagnostics.boxes.is_empty() {
        return Ok(Prediction { mask, diagnostics });
    }
    let coords = boxes_to_prompt_coords(&diagnostics.boxes, size)?;
    let groups: Vec<Vec<[f64; 4]>> = if cfg.per_box_decode { coords.iter().map(|c| vec![*c]).collect() } else { vec![coords] };
    for group in groups {
        let pred = segment(&model.segnet, &model.store, image, &group)?;
        let (k, best, _) = select_best_mask(&pred)?;
        let m = binarize(best, cfg.mask_threshold);
        mask.zip_mut_with(&m, |a, &b| *a |= b);
        diagnostics.scores.push(pred.scores.clone());
        diagnostics.selected.push(k);
    }
    Ok(Prediction { mask, diagnostics })
}
