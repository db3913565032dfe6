//! Joint training (end-to-end and two-stage), inference and evaluation.

mod config;
mod model;
mod optim;
mod predict;
mod step;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier;
use crate::dataio::{Dataset, Sample};
use crate::error::{bail, Error, Result};
use crate::metrics::{evaluate_pair, Domain, EvalReport, MeanStd, MetricsConfig, SampleEval};
use crate::promptgen::boxes_to_prompt_coords;
use crate::segnet::{DECODER_PREFIX, PROMPT_PREFIX};

pub use config::{lr_at, InferenceConfig, LrSchedule, TrainConfig, TrainMode};
pub use model::Model;
pub use optim::{AdamW, Moments};
pub use predict::{predict, Diagnostics, Prediction};
pub use step::{cam_prompt, compute_loss, displaced_box, empty_target_loss, segmentation_loss, train_step, BoxSource, LossGraph, LossRecord, StepOptions, MIN_DISPLACED_SIDE, POSITIVE_CLASS};

pub const LOG_FILE: &str = "train_log.json";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub l_cls: f64,
    pub l_seg: f64,
    pub total: f64,
    pub lr: f64,
    pub steps: usize,
    pub n_gated: usize,
    pub n_fallback: usize,
    pub val_dice: Option<f64>,
    pub val_hd: Option<f64>,
}

/// Everything needed to continue a run: weights, optimizer moments, the
/// epoch counter and the log so far. Batch order is a pure function of
/// `(seed, epoch)`, so no RNG state is carried.
#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub best: Option<(usize, f64)>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    log: Vec<EpochLog>,
    best: Option<(usize, f64)>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
            epoch: 0,
            log: Vec::new(),
            best: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = StateMeta {
            epoch: self.epoch,
            log: self.log.clone(),
            best: self.best,
        };
        self.model.save(dir, Some(&self.optimizer), serde_json::to_value(meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (model, optimizer, extra) = Model::load(dir)?;
        let Some(optimizer) = optimizer else {
            bail!(DataIntegrity, "{} holds no optimizer state and cannot be resumed", dir.display());
        };
        let meta: StateMeta = serde_json::from_value(extra).map_err(|e| Error::MalformedHeader {
            path: dir.to_path_buf(),
            reason: format!("training state: {e}"),
        })?;
        Ok(Self {
            model,
            optimizer,
            epoch: meta.epoch,
            log: meta.log,
            best: meta.best,
        })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Weights of the best-validation epoch (the final weights when no
    /// validation ran).
    pub best_model: Model,
}

fn options(model: &Model, cfg: &TrainConfig, stage: u8) -> StepOptions {
    let (train_classifier, train_segnet) = match (cfg.mode, stage) {
        (TrainMode::SamMixE2e, _) => (true, true),
        (TrainMode::ClsOnly, _) => (true, false),
        (TrainMode::SamPpTwoStage, 1) => (true, false),
        (TrainMode::SamPpTwoStage, _) => (false, true),
    };
    StepOptions {
        lambda_seg: cfg.lambda_seg,
        score_loss_weight: cfg.score_loss_weight,
        gt_box_fallback: cfg.gt_box_fallback,
        train_classifier,
        train_segnet,
        focal_alpha: model.classifier.focal_alpha,
        focal_gamma: model.classifier.focal_gamma,
        displaced_weight: cfg.displaced_box_weight,
        displace_seed: 0,
    }
}

fn total_epochs(cfg: &TrainConfig, train: &Dataset) -> usize {
    match cfg.mode {
        TrainMode::SamPpTwoStage if train.labeled_ids.is_empty() => cfg.epochs,
        TrainMode::SamPpTwoStage => cfg.epochs + cfg.stage2_epochs(),
        _ => cfg.epochs,
    }
}

/// Seed-determined visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Boxes from a (frozen) classifier for every labeled sample; samples with
/// no CAM box fall back to their ground-truth box when enabled.
/// Seed of the per-step randomness, a pure function of `(seed, epoch, batch)`
/// so resumed runs replay it exactly.
pub fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | ((epoch as u64) << 32) | batch as u64);
    rng.random()
}

pub fn precompute_boxes(model: &Model, train: &Dataset, gt_box_fallback: bool) -> Result<HashMap<String, Vec<[f64; 4]>>> {
    let fc = classifier::fc_weights(&model.store)?;
    let mut out = HashMap::new();
    for s in train.samples.iter().filter(|s| train.is_labeled(&s.id)) {
        let o = classifier::classifier_forward(&s.image, &model.classifier, &model.store)?;
        let mut boxes = cam_prompt(model, &o.f_last, &fc)?;
        if boxes.is_empty() && gt_box_fallback {
            boxes.extend(s.seg_label.as_ref().and_then(crate::promptgen::BoxPrompt::enclosing));
        }
        out.insert(s.id.clone(), boxes_to_prompt_coords(&boxes, model.image_size())?);
    }
    Ok(out)
}

/// Train from scratch according to `cfg.mode`. The dataset must already
/// carry its supervision split (`labeled_ids`).
pub fn train(model: Model, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, eval: &EvalOptions, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    resume(TrainState::new(model, cfg), train, val, cfg, eval, out_dir, None)
}

/// Two-stage protocol: classifier alone, then the segmenter on boxes from the
/// frozen classifier. With no labeled samples the second stage is skipped.
pub fn train_two_stage(model: Model, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, eval: &EvalOptions, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: TrainMode::SamPpTwoStage,
        ..cfg.clone()
    };
    self::train(model, train, val, &cfg, eval, out_dir)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
}

/// Continue `state` up to the configured number of epochs, or only until
/// `stop_after` epochs when given.
pub fn resume(
    mut state: TrainState,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    eval: &EvalOptions,
    out_dir: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate()?;
    if train.is_empty() {
        bail!(InvalidArgument, "training set is empty");
    }
    if cfg.mode == TrainMode::SamMixE2e || cfg.mode == TrainMode::SamPpTwoStage {
        state.model.store.set_trainable(PROMPT_PREFIX, !cfg.freeze_prompt_encoder)?;
        state.model.store.set_trainable(DECODER_PREFIX, !cfg.freeze_decoder)?;
    }
    let total = total_epochs(cfg, train);
    let end = stop_after.map_or(total, |s| s.min(total));
    let mut best_model = None;
    let mut fixed: Option<HashMap<String, Vec<[f64; 4]>>> = None;

    while state.epoch < end {
        let epoch = state.epoch;
        let stage = if cfg.mode == TrainMode::SamPpTwoStage && epoch >= cfg.epochs { 2 } else { 1 };
        if stage == 2 && fixed.is_none() {
            state.model.store.set_trainable(classifier::PREFIX, false)?;
            fixed = Some(precompute_boxes(&state.model, train, cfg.gt_box_fallback)?);
        }
        let opts = options(&state.model, cfg, stage);
        let pool: Vec<&Sample> = if stage == 2 {
            train.samples.iter().filter(|s| train.is_labeled(&s.id)).collect()
        } else {
            train.samples.iter().collect()
        };
        let order = epoch_order(pool.len(), cfg.seed, epoch);
        let batches: Vec<Vec<&Sample>> = order.chunks(cfg.batch_size).map(|c| c.iter().map(|&i| pool[i]).collect()).collect();
        let source = match &fixed {
            Some(map) => BoxSource::Fixed(map),
            None => BoxSource::Cam,
        };
        let (mut l_cls, mut l_seg, mut n_gated, mut n_fallback, mut seg_batches) = (0.0, 0.0, 0, 0, 0);
        let mut lr = cfg.lr;
        for (b, batch) in batches.iter().enumerate() {
            let local = if stage == 2 { epoch - cfg.epochs } else { epoch };
            lr = lr_at(local as f64 + b as f64 / batches.len() as f64, cfg);
            let opts = StepOptions {
                displace_seed: step_seed(cfg.seed, epoch, b),
                ..opts
            };
            let rec = train_step(&state.model, &mut state.optimizer, batch, &train.labeled_ids, &opts, source, lr)?;
            l_cls += rec.l_cls;
            if rec.n_gated > 0 {
                l_seg += rec.l_seg;
                seg_batches += 1;
            }
            n_gated += rec.n_gated;
            n_fallback += rec.n_fallback;
        }
        let steps = batches.len();
        let l_cls = if opts.train_classifier { l_cls / steps as f64 } else { 0.0 };
        let l_seg = if seg_batches > 0 { l_seg / seg_batches as f64 } else { 0.0 };
        let validate_now = cfg.validate && val.is_some() && !(cfg.mode == TrainMode::SamPpTwoStage && stage == 1 && total > cfg.epochs);
        let (val_dice, val_hd) = match (validate_now, val) {
            (true, Some(v)) => {
                let samples = evaluate_dataset(&state.model, v, eval)?;
                let d = MeanStd::of(&samples.iter().map(|s| s.dice).collect::<Vec<_>>()).map(|m| m.mean);
                let h = MeanStd::of(&samples.iter().filter_map(|s| s.hausdorff_px).collect::<Vec<_>>()).map(|m| m.mean);
                (d, h)
            }
            _ => (None, None),
        };
        state.log.push(EpochLog {
            epoch,
            stage,
            l_cls,
            l_seg,
            total: l_cls + cfg.lambda_seg * l_seg,
            lr,
            steps,
            n_gated,
            n_fallback,
            val_dice,
            val_hd,
        });
        state.epoch += 1;
        if let Some(d) = val_dice {
            if state.best.is_none_or(|(_, b)| d > b) {
                state.best = Some((epoch, d));
                best_model = Some(state.model.clone_deep()?);
                if let Some(dir) = out_dir {
                    state.model.save(&dir.join(BEST_DIR), None, serde_json::json!({"epoch": epoch, "val_dice": d}))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            state.save(&dir.join(LAST_DIR))?;
            write_log(&dir.join(LOG_FILE), &state.log)?;
        }
    }

    let best_model = match best_model {
        Some(m) => m,
        None => match (state.best, out_dir) {
            (Some(_), Some(dir)) if dir.join(BEST_DIR).exists() => Model::load(&dir.join(BEST_DIR))?.0,
            _ => state.model.clone_deep()?,
        },
    };
    if let Some(dir) = out_dir {
        if state.best.is_none() {
            best_model.save(&dir.join(BEST_DIR), None, serde_json::json!({"epoch": state.epoch.saturating_sub(1)}))?;
        }
    }
    Ok(TrainOutcome { state, best_model })
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(log)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-sample metrics of the full inference pipeline on a dataset.
pub fn evaluate_dataset(model: &Model, data: &Dataset, eval: &EvalOptions) -> Result<Vec<SampleEval>> {
    let mut out = Vec::new();
    for s in &data.samples {
        let Some(gt) = s.seg_label.as_ref() else { continue };
        if !eval.metrics.include_negatives && s.cls_label == 0 {
            continue;
        }
        let p = predict(model, &s.image, &eval.inference)?;
        out.push(evaluate_pair(&s.id, &p.mask, gt, eval.metrics.hd_percentile)?);
    }
    Ok(out)
}

pub fn evaluate_report(model: &Model, data: &Dataset, eval: &EvalOptions, name: &str, domain: Domain, run_seed: u64) -> Result<EvalReport> {
    Ok(EvalReport {
        model: name.to_string(),
        domain,
        run_seed,
        samples: evaluate_dataset(model, data, eval)?,
    })
}
