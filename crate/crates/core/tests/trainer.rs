mod common;

use std::collections::{BTreeSet, HashMap};

use candle_core::{DType, Tensor};
use common::{labeled, tiny_model, toy_dataset};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sammix::dataio::{split_supervision, Dataset, Sample};
use sammix::segnet;
use sammix::trainer::{self, compute_loss, train_step, AdamW, BoxSource, EvalOptions, Model, StepOptions, TrainConfig, TrainMode, TrainState};

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

/// Name and bit pattern of every tensor whose name starts with `prefix`.
fn snapshot(m: &Model, prefix: &str) -> Vec<(String, Vec<u32>)> {
    m.store.entries().iter().filter(|e| e.name.starts_with(prefix)).map(|e| (e.name.clone(), bits(e.slot.tensor()))).collect()
}

fn opts(m: &Model) -> StepOptions {
    StepOptions {
        lambda_seg: 1.0,
        score_loss_weight: 1.0,
        gt_box_fallback: true,
        train_classifier: true,
        train_segnet: true,
        focal_alpha: m.classifier.focal_alpha,
        focal_gamma: m.classifier.focal_gamma,
        displaced_weight: 0.5,
        displace_seed: 7,
    }
}

fn model_and_data(seed: u64) -> (Model, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = tiny_model(&mut rng, DType::F32);
    let data = toy_dataset(4, 2, m.image_size().0, seed);
    (m, data)
}

fn quick_cfg(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 2,
        batch_size: 3,
        validate: false,
        seeds: vec![0],
        ..TrainConfig::default()
    }
}

fn eval() -> EvalOptions {
    EvalOptions::default()
}

#[test]
fn zero_lambda_leaves_the_segmenter_untouched() {
    for seed in 0..4 {
        let (m, data) = model_and_data(seed);
        let before = snapshot(&m, segnet::PREFIX);
        let cls_before = snapshot(&m, sammix::classifier::PREFIX);
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let ids = labeled(&["p00", "p01", "p02"]);
        let o = StepOptions { lambda_seg: 0.0, ..opts(&m) };
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 1e-4);
        for _ in 0..3 {
            let rec = train_step(&m, &mut opt, &batch, &ids, &o, BoxSource::Cam, 1e-2).unwrap();
            assert_eq!(rec.n_gated, 0);
            assert_eq!(rec.total, rec.l_cls);
        }
        assert_eq!(before, snapshot(&m, segnet::PREFIX));
        assert_ne!(cls_before, snapshot(&m, sammix::classifier::PREFIX));
    }
}

#[test]
fn unlabeled_batch_matches_classification_only() {
    for seed in 0..4 {
        let (m, data) = model_and_data(seed);
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let full = compute_loss(&m, &batch, &BTreeSet::new(), &opts(&m), BoxSource::Cam).unwrap();
        let cls_only = StepOptions { train_segnet: false, ..opts(&m) };
        let reference = compute_loss(&m, &batch, &labeled(&["p00"]), &cls_only, BoxSource::Cam).unwrap();
        assert_eq!(full.record.l_seg, 0.0);
        assert_eq!(full.record.total.to_bits(), reference.record.total.to_bits());
        let (ga, gb) = (full.total.unwrap().backward().unwrap(), reference.total.unwrap().backward().unwrap());
        for (name, var) in m.store.trainable() {
            let a = ga.get(var.as_tensor()).map(bits);
            let b = gb.get(var.as_tensor()).map(bits);
            if name.starts_with(segnet::PREFIX) {
                assert!(a.is_none() || a.as_ref().unwrap().iter().all(|&v| f32::from_bits(v) == 0.0), "{name}");
            } else {
                assert_eq!(a, b, "{name}");
            }
        }
    }
}

#[test]
fn logged_total_decomposes() {
    for seed in 0..4 {
        let (m, data) = model_and_data(seed);
        let batch: Vec<&Sample> = data.samples.iter().collect();
        for lambda in [0.3, 1.0, 2.5] {
            let o = StepOptions { lambda_seg: lambda, ..opts(&m) };
            let r = compute_loss(&m, &batch, &labeled(&["p00", "p01"]), &o, BoxSource::Cam).unwrap().record;
            assert!((r.total - (r.l_cls + lambda * r.l_seg)).abs() <= 1e-8, "{r:?}");
            assert_eq!(r.n_gated, 2);
        }
    }
}

#[test]
fn empty_batch_is_rejected() {
    let (m, _) = model_and_data(0);
    assert!(compute_loss(&m, &[], &BTreeSet::new(), &opts(&m), BoxSource::Cam).is_err());
}

#[test]
fn zero_epochs_are_rejected() {
    let (m, data) = model_and_data(1);
    let cfg = TrainConfig { epochs: 0, ..quick_cfg(TrainMode::SamMixE2e) };
    assert!(trainer::train(m, &data, None, &cfg, &eval(), None).is_err());
}

#[test]
fn two_stage_without_labels_keeps_the_segmenter_at_init() {
    let (m, data) = model_and_data(2);
    let init = snapshot(&m, segnet::PREFIX);
    let out = trainer::train_two_stage(m, &data, None, &quick_cfg(TrainMode::SamPpTwoStage), &eval(), None).unwrap();
    assert_eq!(out.state.log.len(), 2);
    assert!(out.state.log.iter().all(|l| l.stage == 1 && l.n_gated == 0));
    assert_eq!(init, snapshot(&out.state.model, segnet::PREFIX));
}

#[test]
fn two_stage_freezes_the_classifier_and_fixes_boxes() {
    let (m, data) = model_and_data(3);
    let data = split_supervision(&data, 3, 0).unwrap();
    let cfg = quick_cfg(TrainMode::SamPpTwoStage);
    // stop after stage 1 to capture the classifier the boxes come from
    let tmp = tempfile::tempdir().unwrap();
    let half = trainer::resume(TrainState::new(m, &cfg), &data, None, &cfg, &eval(), Some(tmp.path()), Some(cfg.epochs)).unwrap();
    let boxes = trainer::precompute_boxes(&half.state.model, &data, cfg.gt_box_fallback).unwrap();
    let cls = snapshot(&half.state.model, sammix::classifier::PREFIX);
    let state = TrainState::load(&tmp.path().join(trainer::LAST_DIR)).unwrap();
    let out = trainer::resume(state, &data, None, &cfg, &eval(), None, None).unwrap();
    assert_eq!(out.state.log.iter().filter(|l| l.stage == 2).count(), cfg.epochs);
    assert_eq!(cls, snapshot(&out.state.model, sammix::classifier::PREFIX));
    assert_eq!(boxes, trainer::precompute_boxes(&out.state.model, &data, cfg.gt_box_fallback).unwrap());
    assert_eq!(boxes.len(), 3);
    for l in out.state.log.iter().filter(|l| l.stage == 2) {
        assert_eq!(l.l_cls, 0.0);
        assert_eq!(l.n_gated, 3);
    }
}

#[test]
fn fixed_boxes_are_used_verbatim() {
    let (m, data) = model_and_data(4);
    let batch: Vec<&Sample> = data.samples.iter().take(2).collect();
    let mut map = HashMap::new();
    map.insert("p00".to_string(), vec![[0.1, 0.1, 0.6, 0.6]]);
    let o = StepOptions { train_classifier: false, ..opts(&m) };
    let r = compute_loss(&m, &batch, &labeled(&["p00", "p01"]), &o, BoxSource::Fixed(&map)).unwrap().record;
    // p01 has no entry and falls back to its ground-truth box
    assert_eq!((r.n_gated, r.n_fallback), (2, 1));
    let no_fallback = StepOptions { gt_box_fallback: false, ..o };
    let r = compute_loss(&m, &batch, &labeled(&["p00", "p01"]), &no_fallback, BoxSource::Fixed(&map)).unwrap().record;
    assert_eq!((r.n_gated, r.n_fallback), (1, 0));
}

#[test]
fn predict_is_deterministic_and_survives_degenerate_images() {
    let (m, data) = model_and_data(5);
    let cfg = trainer::InferenceConfig::default();
    for s in &data.samples {
        let a = trainer::predict(&m, &s.image, &cfg).unwrap();
        let b = trainer::predict(&m, &s.image, &cfg).unwrap();
        assert_eq!(a, b);
    }
    let n = m.image_size().0;
    for v in [0.0f32, 1.0] {
        let p = trainer::predict(&m, &Array2::from_elem((n, n), v), &cfg).unwrap();
        assert_eq!(p.mask.dim(), (n, n));
        assert!(p.diagnostics.logits.iter().all(|l| l.is_finite()));
        if p.diagnostics.predicted_class == 0 || p.diagnostics.boxes.is_empty() {
            assert!(p.mask.iter().all(|&x| x == 0));
        }
    }
    assert!(trainer::predict(&m, &Array2::zeros((n + 1, n)), &cfg).is_err());
}

#[test]
fn negative_classification_suppresses_the_mask() {
    // push the head bias hard toward class 0
    let (mut m, data) = model_and_data(6);
    let name = m.store.entries().iter().find(|e| e.name.starts_with("cls.") && e.name.ends_with("fc.b")).unwrap().name.clone();
    let bias = Tensor::new(&[50.0f32, -50.0], &candle_core::Device::Cpu).unwrap();
    m.store.assign(&name, &bias).unwrap();
    for s in &data.samples {
        let p = trainer::predict(&m, &s.image, &Default::default()).unwrap();
        assert_eq!(p.diagnostics.predicted_class, 0);
        assert!(p.diagnostics.boxes.is_empty());
        assert!(p.mask.iter().all(|&x| x == 0));
    }
}

#[test]
fn corrupt_checkpoints_are_errors() {
    let (m, _) = model_and_data(7);
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    m.save(&dir, None, serde_json::json!({})).unwrap();
    assert!(Model::load(&dir).is_ok());
    let params = dir.join(sammix::checkpoint::PARAMS_FILE);
    let mut bytes = std::fs::read(&params).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&params, &bytes).unwrap();
    assert!(Model::load(&dir).is_err());
    std::fs::write(dir.join(sammix::checkpoint::MANIFEST_FILE), "{not json").unwrap();
    assert!(Model::load(&dir).is_err());
    assert!(Model::load(&tmp.path().join("absent")).is_err());
    // a weights-only checkpoint cannot be resumed
    let plain = tmp.path().join("plain");
    m.save(&plain, None, serde_json::json!({})).unwrap();
    assert!(TrainState::load(&plain).is_err());
}

#[test]
fn cls_only_never_touches_the_segmenter() {
    let (m, data) = model_and_data(8);
    let data = split_supervision(&data, 2, 0).unwrap();
    let init = snapshot(&m, segnet::PREFIX);
    let out = trainer::train(m, &data, None, &quick_cfg(TrainMode::ClsOnly), &eval(), None).unwrap();
    assert_eq!(init, snapshot(&out.state.model, segnet::PREFIX));
    assert!(out.state.log.iter().all(|l| l.n_gated == 0 && l.l_seg == 0.0));
}

#[test]
fn joint_training_moves_both_branches_but_not_the_frozen_encoder() {
    let (m, data) = model_and_data(9);
    let data = split_supervision(&data, 2, 0).unwrap();
    let frozen: Vec<_> = snapshot(&m, segnet::ENCODER_PREFIX).into_iter().filter(|(n, _)| !n.contains("lora")).collect();
    let dec = snapshot(&m, segnet::DECODER_PREFIX);
    let cls = snapshot(&m, sammix::classifier::PREFIX);
    let out = trainer::train(m, &data, None, &quick_cfg(TrainMode::SamMixE2e), &eval(), None).unwrap();
    let after: Vec<_> = snapshot(&out.state.model, segnet::ENCODER_PREFIX).into_iter().filter(|(n, _)| !n.contains("lora")).collect();
    assert_eq!(frozen, after);
    assert_ne!(dec, snapshot(&out.state.model, segnet::DECODER_PREFIX));
    assert_ne!(cls, snapshot(&out.state.model, sammix::classifier::PREFIX));
    assert!(out.state.log.iter().all(|l| l.n_gated == 2));
}

#[test]
fn frozen_decoder_flag_is_honoured() {
    let (m, data) = model_and_data(10);
    let data = split_supervision(&data, 2, 0).unwrap();
    let dec = snapshot(&m, segnet::DECODER_PREFIX);
    let prompt = snapshot(&m, segnet::PROMPT_PREFIX);
    let cfg = TrainConfig {
        freeze_decoder: true,
        freeze_prompt_encoder: true,
        ..quick_cfg(TrainMode::SamMixE2e)
    };
    let out = trainer::train(m, &data, None, &cfg, &eval(), None).unwrap();
    assert_eq!(dec, snapshot(&out.state.model, segnet::DECODER_PREFIX));
    assert_eq!(prompt, snapshot(&out.state.model, segnet::PROMPT_PREFIX));
}

#[test]
fn validation_keeps_the_best_epoch() {
    let (m, data) = model_and_data(11);
    let train = split_supervision(&data, 3, 0).unwrap();
    let cfg = TrainConfig {
        validate: true,
        epochs: 3,
        ..quick_cfg(TrainMode::SamMixE2e)
    };
    let tmp = tempfile::tempdir().unwrap();
    let out = trainer::train(m, &train, Some(&data), &cfg, &eval(), Some(tmp.path())).unwrap();
    let vals: Vec<f64> = out.state.log.iter().map(|l| l.val_dice.unwrap()).collect();
    let (best_epoch, best) = out.state.best.unwrap();
    assert_eq!(best, vals.iter().copied().fold(f64::MIN, f64::max));
    assert_eq!(vals[best_epoch], best);
    let again = trainer::evaluate_dataset(&out.best_model, &data, &eval()).unwrap();
    let mean = sammix::metrics::MeanStd::of(&again.iter().map(|s| s.dice).collect::<Vec<_>>()).unwrap().mean;
    assert_eq!(mean.to_bits(), best.to_bits());
    let (loaded, _, _) = Model::load(&tmp.path().join(trainer::BEST_DIR)).unwrap();
    assert_eq!(snapshot(&loaded, ""), snapshot(&out.best_model, ""));
    assert!(tmp.path().join(trainer::LOG_FILE).exists());
}
