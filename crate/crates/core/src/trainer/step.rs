use std::collections::{BTreeSet, HashMap};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::optim::AdamW;
use crate::classifier::{self, compute_cam, fc_weights, focal_loss_tensor};
use crate::dataio::Sample;
use crate::error::{bail, Error, Result};
use crate::grid::binarize;
use crate::metrics::dice_score;
use crate::nn;
use crate::promptgen::{boxes_to_prompt_coords, cam_to_boxes, BoxPrompt};
use crate::segnet::{dice_loss_tensor, image_encode, mask_decode, prompt_encode};

/// Index of the organ-present class; CAMs for prompting always use it.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub l_cls: f64,
    /// Mean segmentation loss over gated samples (0 when none).
    pub l_seg: f64,
    /// `l_cls + lambda_seg * l_seg`.
    pub total: f64,
    pub n_gated: usize,
    /// Gated samples that used the ground-truth box instead of a CAM box.
    pub n_fallback: usize,
}

/// Where segmentation prompts come from during a step.
#[derive(Debug, Clone, Copy)]
pub enum BoxSource<'a> {
    /// Derived from the current classifier's CAM (box coordinates are
    /// constants of the step).
    Cam,
    /// Precomputed normalized boxes keyed by sample id.
    Fixed(&'a HashMap<String, Vec<[f64; 4]>>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub lambda_seg: f64,
    pub score_loss_weight: f64,
    pub gt_box_fallback: bool,
    pub train_classifier: bool,
    pub train_segnet: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the displaced-prompt term (0 disables it).
    pub displaced_weight: f64,
    /// Seeds the displaced-box placement of this step.
    pub displace_seed: u64,
}

pub struct LossGraph {
    /// `None` when nothing in the batch contributes a loss.
    pub total: Option<Tensor>,
    pub record: LossRecord,
}

/// Normalized CAM boxes of one sample from host-side classifier features.
pub fn cam_prompt(model: &Model, f_last: &ndarray::Array3<f32>, fc: &ndarray::Array2<f32>) -> Result<Vec<BoxPrompt>> {
    let cam = compute_cam(f_last, fc, POSITIVE_CLASS, model.image_size())?;
    cam_to_boxes(&cam, &model.threshold)
}

fn features_host(f_last: &Tensor) -> Result<Vec<ndarray::Array3<f32>>> {
    let (b, d, h, w) = f_last.dims4()?;
    let v = nn::to_host(f_last)?;
    Ok((0..b)
        .map(|i| {
            let chunk = v[i * d * h * w..(i + 1) * d * h * w].iter().map(|&x| x as f32).collect();
            ndarray::Array3::from_shape_vec((d, h, w), chunk).expect("feature chunk")
        })
        .collect())
}

/// Build the loss graph for one batch.
///
/// The segmentation term is evaluated only for samples in `labeled` that
/// carry a mask and receive at least one box; the segmenter never sees any
/// other sample, so those contribute exactly nothing to its gradients.
pub fn compute_loss(model: &Model, batch: &[&Sample], labeled: &BTreeSet<String>, opts: &StepOptions, boxes: BoxSource) -> Result<LossGraph> {
    if batch.is_empty() {
        bail!(InvalidArgument, "empty batch");
    }
    let dtype = model.store.dtype();
    let (h, w) = model.image_size();
    let grids: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let images = classifier::image_tensor(&grids, dtype)?;
    let seg_active = opts.train_segnet && opts.lambda_seg > 0.0;
    let needs_cam = seg_active && matches!(boxes, BoxSource::Cam);

    let mut l_cls = None;
    let mut feats = Vec::new();
    if opts.train_classifier || needs_cam {
        let (logits, f_last) = classifier::forward(&model.classifier, &model.store, &images)?;
        if opts.train_classifier {
            let labels: Vec<u8> = batch.iter().map(|s| s.cls_label).collect();
            l_cls = Some(focal_loss_tensor(&logits, &labels, opts.focal_alpha, opts.focal_gamma)?.mean_all()?);
        }
        if needs_cam {
            feats = features_host(&f_last.detach())?;
        }
    }

    let mut gated = Vec::new();
    let mut n_fallback = 0;
    if seg_active {
        let fc = if needs_cam { Some(fc_weights(&model.store)?) } else { None };
        for (i, s) in batch.iter().enumerate() {
            let Some(gt) = s.seg_label.as_ref() else { continue };
            if !labeled.contains(&s.id) {
                continue;
            }
            let mut coords = match boxes {
                BoxSource::Cam => boxes_to_prompt_coords(&cam_prompt(model, &feats[i], fc.as_ref().expect("fc"))?, (h, w))?,
                BoxSource::Fixed(map) => map.get(&s.id).cloned().unwrap_or_default(),
            };
            if coords.is_empty() && opts.gt_box_fallback {
                if let Some(b) = BoxPrompt::enclosing(gt) {
                    coords = boxes_to_prompt_coords(&[b], (h, w))?;
                    n_fallback += 1;
                }
            }
            if !coords.is_empty() {
                gated.push((i, coords));
            }
        }
    }

    let mut l_seg = None;
    if !gated.is_empty() {
        let idx: Vec<u32> = gated.iter().map(|(i, _)| *i as u32).collect();
        let sel = Tensor::new(idx.as_slice(), images.device())?;
        let g_images = images.index_select(&sel, 0)?;
        let dense = image_encode(&model.segnet, &model.store, &g_images)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.displace_seed);
        let mut per_sample = Vec::with_capacity(gated.len());
        for (g, (i, coords)) in gated.iter().enumerate() {
            let gt = batch[*i].seg_label.as_ref().expect("gated samples carry masks");
            let (emb, image) = (dense.get(g)?, g_images.narrow(0, g, 1)?);
            let sparse = prompt_encode(&model.segnet, &model.store, coords)?;
            let out = mask_decode(&model.segnet, &model.store, &emb, &sparse, &image)?;
            let mut loss = segmentation_loss(&out.masks, &out.scores, gt, opts.score_loss_weight, dtype)?;
            if opts.displaced_weight > 0.0 {
                if let Some(moved) = displaced_box(&coords[0], gt, &mut rng) {
                    let sparse = prompt_encode(&model.segnet, &model.store, &[moved])?;
                    let out = mask_decode(&model.segnet, &model.store, &emb, &sparse, &image)?;
                    let area = box_area(&moved, (h, w));
                    let off = empty_target_loss(&out.masks, &out.scores, area, opts.score_loss_weight, dtype)?;
                    loss = (loss + (off * opts.displaced_weight)?)?;
                }
            }
            per_sample.push(loss);
        }
        l_seg = Some(Tensor::stack(&per_sample, 0)?.mean_all()?);
    }

    let host = |t: &Option<Tensor>| -> Result<f64> {
        Ok(match t {
            Some(t) => t.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            None => 0.0,
        })
    };
    let (c, s) = (host(&l_cls)?, host(&l_seg)?);
    let record = LossRecord {
        l_cls: c,
        l_seg: s,
        total: c + opts.lambda_seg * s,
        n_gated: gated.len(),
        n_fallback,
    };
    if !record.total.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
        return Err(Error::Diverged(format!("non-finite loss (l_cls={c}, l_seg={s}) on batch {ids:?}")));
    }
    let total = match (l_cls, l_seg) {
        (Some(c), Some(s)) => Some((c + (s * opts.lambda_seg)?)?),
        (Some(c), None) => Some(c),
        (None, Some(s)) => Some((s * opts.lambda_seg)?),
        (None, None) => None,
    };
    Ok(LossGraph { total, record })
}

/// `min_k DiceLoss_k + w · mean_k (s_k - Dice_k)²`, where `Dice_k` is the
/// hard Dice of mask `k` binarized at 0.5 (a constant target).
pub fn segmentation_loss(masks: &Tensor, scores: &Tensor, gt: &crate::BinaryMask, score_weight: f64, dtype: DType) -> Result<Tensor> {
    let (k, h, w) = masks.dims3()?;
    let gt_t = nn::constant(gt.iter().map(|&v| f64::from(v.min(1))).collect(), &[h, w], dtype)?;
    let dice = dice_loss_tensor(masks, &gt_t)?.min(0)?;
    if score_weight == 0.0 {
        return Ok(dice);
    }
    let host = nn::to_host(masks)?;
    let mut target = Vec::with_capacity(k);
    for m in host.chunks(h * w) {
        let grid = ndarray::Array2::from_shape_vec((h, w), m.iter().map(|&v| v as f32).collect()).expect("mask chunk");
        target.push(dice_score(&binarize(&grid, 0.5), gt)?);
    }
    let target = nn::constant(target, &[k], dtype)?;
    let score = (scores - target)?.sqr()?.mean_all()?;
    Ok((dice + (score * score_weight)?)?)
}

/// Narrowest free strip that can hold a displaced box, in pixels.
pub const MIN_DISPLACED_SIDE: usize = 4;

/// A copy of the normalized box `c` moved into one of the strips left, right,
/// above or below the foreground extent of `gt`, shrunk to fit the strip.
/// Strip and position are drawn uniformly; `None` when no strip is at least
/// [`MIN_DISPLACED_SIDE`] pixels across.
pub fn displaced_box(c: &[f64; 4], gt: &crate::BinaryMask, rng: &mut ChaCha8Rng) -> Option<[f64; 4]> {
    let (h, w) = gt.dim();
    let fg = BoxPrompt::enclosing(gt)?;
    let bw = ((c[2] - c[0]) * w as f64).round() as usize + 1;
    let bh = ((c[3] - c[1]) * h as f64).round() as usize + 1;
    // (x0, y0, width, height) of each free strip
    let strips: Vec<(usize, usize, usize, usize)> = [
        (0, 0, fg.x_min, h),
        (fg.x_max + 1, 0, w - fg.x_max - 1, h),
        (0, 0, w, fg.y_min),
        (0, fg.y_max + 1, w, h - fg.y_max - 1),
    ]
    .into_iter()
    .filter(|s| s.2 >= MIN_DISPLACED_SIDE && s.3 >= MIN_DISPLACED_SIDE)
    .collect();
    if strips.is_empty() {
        return None;
    }
    let (sx, sy, sw, sh) = strips[rng.random_range(0..strips.len())];
    let (bw, bh) = (bw.min(sw), bh.min(sh));
    let x = sx + rng.random_range(0..=sw - bw);
    let y = sy + rng.random_range(0..=sh - bh);
    let (x1, y1) = (x + bw - 1, y + bh - 1);
    Some([x as f64 / w as f64, y as f64 / h as f64, x1 as f64 / w as f64, y1 as f64 / h as f64])
}

fn box_area(c: &[f64; 4], (h, w): (usize, usize)) -> f64 {
    (((c[2] - c[0]) * w as f64).round() + 1.0) * (((c[3] - c[1]) * h as f64).round() + 1.0)
}

/// Loss for a prompt whose region holds no foreground: `mean_k Σŷ_k / (Σŷ_k + A)`
/// with `A` the prompt box area, plus the score term against the hard Dice
/// of each mask with the empty target (1 for an empty mask, else 0).
pub fn empty_target_loss(masks: &Tensor, scores: &Tensor, box_area: f64, score_weight: f64, dtype: DType) -> Result<Tensor> {
    let (k, h, w) = masks.dims3()?;
    let mass = masks.reshape((k, h * w))?.sum(1)?;
    let fp = (&mass / (&mass + box_area)?)?.mean_all()?;
    if score_weight == 0.0 {
        return Ok(fp);
    }
    let host = nn::to_host(masks)?;
    let target: Vec<f64> = host.chunks(h * w).map(|m| f64::from(u8::from(m.iter().all(|&v| v < 0.5)))).collect();
    let target = nn::constant(target, &[k], dtype)?;
    let score = (scores - target)?.sqr()?.mean_all()?;
    Ok((fp + (score * score_weight)?)?)
}

/// One optimizer update; returns the loss record (no update when the batch
/// has nothing to learn from).
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    optimizer: &mut AdamW,
    batch: &[&Sample],
    labeled: &BTreeSet<String>,
    opts: &StepOptions,
    boxes: BoxSource,
    lr: f64,
) -> Result<LossRecord> {
    let graph = compute_loss(model, batch, labeled, opts, boxes)?;
    if let Some(total) = graph.total {
        let grads = total.backward()?;
        optimizer.step(&model.store, &grads, lr)?;
    }
    Ok(graph.record)
}
