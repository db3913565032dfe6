//! Regression goldens pinned from a verified first run. Set
//! `SAMMIX_PIN_GOLDEN=1` to rewrite `tests/golden/core.json`.

mod common;

use std::path::PathBuf;

use candle_core::DType;
use common::{desk, phantom_splits};
use ndarray::Array2;
use sammix::classifier::{classifier_forward, image_tensor};
use sammix::dataio::split_supervision;
use sammix::metrics::render_overlay;
use sammix::promptgen::{boxes_to_prompt_coords, BoxPrompt};
use sammix::segnet::{image_encode, prompt_encode, segment, select_best_mask};
use sammix::trainer::Model;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const REL_TOL: f64 = 1e-5;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/core.json")
}

fn desk_model() -> Model {
    let cfg = desk();
    Model::init(cfg.classifier, cfg.segnet, cfg.promptgen, 0, DType::F32).unwrap()
}

/// First organ-bearing test slice of a 3-volume phantom set.
fn pinned_slice() -> sammix::dataio::Sample {
    let splits = phantom_splits(3, 21);
    splits.iter().flat_map(|d| d.samples.iter()).find(|s| s.cls_label == 1).unwrap().clone()
}

fn observed() -> Value {
    let splits = phantom_splits(16, 0);
    let chosen: Vec<String> = split_supervision(&splits[0], 5, 17).unwrap().labeled_ids.into_iter().collect();

    let model = desk_model();
    let slice = pinned_slice();
    let out = classifier_forward(&slice.image, &model.classifier, &model.store).unwrap();

    let images = image_tensor(&[&slice.image], DType::F32).unwrap();
    let emb: Vec<f32> = image_encode(&model.segnet, &model.store, &images).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let emb_sum: f64 = emb.iter().map(|&v| f64::from(v)).sum();
    let emb_abs: f64 = emb.iter().map(|&v| f64::from(v).abs()).sum();

    let tokens: Vec<Vec<f32>> = prompt_encode(&model.segnet, &model.store, &[[0.0, 0.0, 1.0, 1.0]]).unwrap().to_vec2().unwrap();
    let norm = |t: &[f32]| t.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    let corner_gap = norm(&tokens[0]) - norm(&tokens[1]);

    let gt = slice.seg_label.as_ref().unwrap();
    let coords = boxes_to_prompt_coords(&[BoxPrompt::enclosing(gt).unwrap()], slice.dims()).unwrap();
    let pred = segment(&model.segnet, &model.store, &slice.image, &coords).unwrap();
    let mask_sums: Vec<f64> = pred.masks.iter().map(|m| m.iter().map(|&v| f64::from(v)).sum()).collect();
    let scores: Vec<f64> = pred.scores.iter().map(|&s| f64::from(s)).collect();
    let (best, _, _) = select_best_mask(&pred).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("o.png");
    let pred_mask = Array2::from_shape_fn(gt.dim(), |(y, x)| u8::from(gt[[y.saturating_sub(2), x]] == 1));
    render_overlay(&slice.image, gt, &pred_mask, &png).unwrap();
    let overlay = hex(&Sha256::digest(std::fs::read(&png).unwrap()));

    json!({
        "split_n5_seed17": chosen,
        "pinned_slice": slice.id,
        "classifier_logits": out.logits,
        "embedding_sum": emb_sum,
        "embedding_abs_sum": emb_abs,
        "corner_norm_gap": corner_gap,
        "mask_prob_sums": mask_sums,
        "mask_scores": scores,
        "selected_mask": best,
        "overlay_png_sha256": overlay,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Exact for everything except floats, which agree to `REL_TOL`.
fn close(a: &Value, b: &Value, path: &str, errs: &mut Vec<String>) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) if x.is_f64() || y.is_f64() => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() > REL_TOL * x.abs().max(y.abs()).max(1.0) {
                errs.push(format!("{path}: {x} vs golden {y}"));
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                close(p, q, &format!("{path}[{i}]"), errs);
            }
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => {
            for (k, v) in x {
                match y.get(k) {
                    Some(w) => close(v, w, &format!("{path}.{k}"), errs),
                    None => errs.push(format!("{path}.{k}: missing from golden")),
                }
            }
        }
        _ if a == b => {}
        _ => errs.push(format!("{path}: {a} vs golden {b}")),
    }
}

#[test]
fn outputs_match_pinned_goldens() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let got = observed();
    if std::env::var_os("SAMMIX_PIN_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
        return;
    }
    let golden: Value = serde_json::from_str(&std::fs::read_to_string(golden_path()).unwrap()).unwrap();
    let mut errs = Vec::new();
    close(&got, &golden, "", &mut errs);
    assert!(errs.is_empty(), "{}", errs.join("\n"));
}

#[test]
fn corner_tokens_are_order_equivariant() {
    let model = desk_model();
    let a = [0.1, 0.2, 0.5, 0.6];
    let b = [0.3, 0.0, 0.9, 0.4];
    let ab: Vec<Vec<f32>> = prompt_encode(&model.segnet, &model.store, &[a, b]).unwrap().to_vec2().unwrap();
    let ba: Vec<Vec<f32>> = prompt_encode(&model.segnet, &model.store, &[b, a]).unwrap().to_vec2().unwrap();
    assert_eq!(ab[0..2], ba[2..4]);
    assert_eq!(ab[2..4], ba[0..2]);
    let aa: Vec<Vec<f32>> = prompt_encode(&model.segnet, &model.store, &[a, a]).unwrap().to_vec2().unwrap();
    assert_eq!(aa[0..2], aa[2..4]);
}
