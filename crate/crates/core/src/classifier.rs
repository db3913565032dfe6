//! Auxiliary classifier: residual conv encoder, global-average-pooling head,
//! binary focal loss and class-activation maps.

use candle_core::{DType, Tensor, D};
use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::{resize_grid, CamGrid, ImageGrid, ResizeMode};
use crate::nn;
use crate::params::ParamStore;

pub const PREFIX: &str = "cls.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    /// Output channels of each downsampling stage.
    pub channels: Vec<usize>,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Fixed input normalization `(x - input_mean) / input_std` applied
    /// before the first stage.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            channels: vec![16, 32, 64, 64],
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            input_mean: 0.5,
            input_std: 0.25,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            bail!(Config, "classifier needs at least one stage with nonzero channels");
        }
        let (h, _) = self.feature_size();
        if h < 1 {
            bail!(Config, "image size {} is too small for {} stages", self.image_size, self.channels.len());
        }
        if !(self.input_std > 0.0 && self.input_mean.is_finite()) {
            bail!(Config, "input_std must be positive");
        }
        if self.focal_alpha <= 0.0 || self.focal_gamma < 0.0 {
            bail!(Config, "focal loss needs alpha > 0 and gamma >= 0");
        }
        Ok(())
    }

    /// Spatial size of the final feature map (valid 3×3 stride-2 stages).
    pub fn feature_size(&self) -> (usize, usize) {
        let mut s = self.image_size as i64;
        for _ in &self.channels {
            s = if s >= 3 { (s - 3) / 2 + 1 } else { 0 };
        }
        (s.max(0) as usize, s.max(0) as usize)
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }
}

/// Logits and final-stage features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub logits: [f64; 2],
    /// `D × h × w` final-stage feature maps.
    pub f_last: Array3<f32>,
}

impl ClassifierOutput {
    pub fn predicted_class(&self) -> u8 {
        u8::from(self.logits[1] > self.logits[0])
    }
}

/// Register freshly initialized classifier parameters (He-normal convs,
/// zero biases, small FC weights).
pub fn init_params(cfg: &ClassifierConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let p = format!("{PREFIX}stage{i}");
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        store.insert_normal(&format!("{p}.down.w"), &[c, c_in, 3, 3], he(9 * c_in), true, rng)?;
        store.insert_const(&format!("{p}.down.b"), &[c], 0.0, true)?;
        store.insert_normal(&format!("{p}.res_a.w"), &[c, c, 3, 3], he(9 * c), true, rng)?;
        store.insert_const(&format!("{p}.res_a.b"), &[c], 0.0, true)?;
        // Residual branch starts small so each stage begins near identity.
        store.insert_normal(&format!("{p}.res_b.w"), &[c, c, 3, 3], 0.1 * he(9 * c), true, rng)?;
        store.insert_const(&format!("{p}.res_b.b"), &[c], 0.0, true)?;
        c_in = c;
    }
    store.insert_normal(&format!("{PREFIX}fc.w"), &[2, c_in], (1.0 / c_in as f64).sqrt(), true, rng)?;
    store.insert_const(&format!("{PREFIX}fc.b"), &[2], 0.0, true)?;
    Ok(())
}

/// Batched forward pass: `images` is `(B, 1, H, W)`; returns logits `(B, 2)`
/// and final features `(B, D, h, w)`.
///
/// Downsampling convs are padding-free and the residual convs use replicate
/// padding, so a constant image yields spatially constant features.
pub fn forward(cfg: &ClassifierConfig, store: &ParamStore, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, h, w) = images.dims4()?;
    if c != 1 || h != cfg.image_size || w != cfg.image_size {
        bail!(
            Config,
            "classifier configured for 1x{s}x{s} inputs, got {c}x{h}x{w}",
            s = cfg.image_size
        );
    }
    let fc_w = store.get(&format!("{PREFIX}fc.w"))?;
    if fc_w.dims() != [2, cfg.feature_dim()] {
        bail!(Config, "fc weights {:?} do not match final stage width {}", fc_w.dims(), cfg.feature_dim());
    }
    let mut x = images.to_dtype(store.dtype())?.affine(1.0 / cfg.input_std, -cfg.input_mean / cfg.input_std)?;
    for i in 0..cfg.channels.len() {
        let p = format!("{PREFIX}stage{i}");
        let get = |n: &str| store.get(&format!("{p}.{n}"));
        x = nn::conv2d(&x, get("down.w")?, get("down.b")?, 0, 2)?.relu()?;
        let r = nn::conv2d(&nn::pad_replicate(&x, 1)?, get("res_a.w")?, get("res_a.b")?, 0, 1)?.relu()?;
        let r = nn::conv2d(&nn::pad_replicate(&r, 1)?, get("res_b.w")?, get("res_b.b")?, 0, 1)?;
        x = (x + r)?.relu()?;
    }
    let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
    let logits = nn::linear(&pooled, fc_w, Some(store.get(&format!("{PREFIX}fc.b"))?))?;
    Ok((logits, x))
}

pub fn image_tensor(images: &[&ImageGrid], dtype: DType) -> Result<Tensor> {
    let (h, w) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            bail!(ShapeMismatch, "batch mixes image sizes {:?} and {:?}", (h, w), img.dim());
        }
        data.extend(img.iter().map(|&v| v as f64));
    }
    nn::constant(data, &[images.len(), 1, h, w], dtype)
}

/// Host-side inference for a single image.
pub fn classifier_forward(image: &ImageGrid, cfg: &ClassifierConfig, store: &ParamStore) -> Result<ClassifierOutput> {
    if image.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "input image contains non-finite values");
    }
    let (logits, f_last) = forward(cfg, store, &image_tensor(&[image], store.dtype())?)?;
    let l = nn::to_host(&logits)?;
    let (_, d, h, w) = f_last.dims4()?;
    let f = nn::to_host(&f_last)?.into_iter().map(|v| v as f32).collect();
    Ok(ClassifierOutput {
        logits: [l[0], l[1]],
        f_last: Array3::from_shape_vec((d, h, w), f).map_err(|e| crate::Error::ShapeMismatch(e.to_string()))?,
    })
}

pub fn fc_weights(store: &ParamStore) -> Result<Array2<f32>> {
    let w = store.get(&format!("{PREFIX}fc.w"))?;
    let (rows, cols) = w.dims2()?;
    let v = nn::to_host(w)?.into_iter().map(|v| v as f32).collect();
    Array2::from_shape_vec((rows, cols), v).map_err(|e| crate::Error::ShapeMismatch(e.to_string()))
}

fn check_focal_args(alpha: f64, gamma: f64) -> Result<()> {
    if !(alpha > 0.0 && gamma >= 0.0) {
        bail!(InvalidArgument, "focal loss needs alpha > 0 and gamma >= 0 (alpha={alpha}, gamma={gamma})");
    }
    Ok(())
}

/// `-α (1 - p_t)^γ log p_t` with `p_t = softmax(logits)[label]`, evaluated in
/// log space so it never takes `log(0)`.
pub fn focal_loss(logits: [f64; 2], label: u8, alpha: f64, gamma: f64) -> Result<f64> {
    check_focal_args(alpha, gamma)?;
    if logits.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "focal loss received non-finite logits {logits:?}");
    }
    if label > 1 {
        bail!(InvalidArgument, "label {label} is not binary");
    }
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let log_pt = logits[label as usize] - lse;
    let log_other = logits[1 - label as usize] - lse;
    Ok(-alpha * (gamma * log_other).exp() * log_pt)
}

/// Per-sample focal loss for a `(B, 2)` logit tensor; returns `(B,)`.
pub fn focal_loss_tensor(logits: &Tensor, labels: &[u8], alpha: f64, gamma: f64) -> Result<Tensor> {
    check_focal_args(alpha, gamma)?;
    let (b, k) = logits.dims2()?;
    if k != 2 || b != labels.len() {
        bail!(ShapeMismatch, "focal loss expects ({}, 2) logits, got ({b}, {k})", labels.len());
    }
    let lse = nn::logsumexp_last(logits)?;
    let log_p = logits.broadcast_sub(&lse)?;
    let onehot: Vec<f64> = labels.iter().flat_map(|&l| if l == 1 { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
    let target = nn::constant(onehot.clone(), &[b, 2], logits.dtype())?;
    let other = nn::constant(onehot.iter().map(|v| 1.0 - v).collect(), &[b, 2], logits.dtype())?;
    let log_pt = (&log_p * &target)?.sum(D::Minus1)?;
    let log_other = (&log_p * &other)?.sum(D::Minus1)?;
    let weight = (log_other * gamma)?.exp()?;
    Ok((weight * log_pt)?.affine(-alpha, 0.0)?)
}

/// Class-activation map: `Σ_i w_i^(c) · F_i`, rectified, bilinearly
/// upsampled to `out_size` and divided by its maximum (all-zero if the
/// maximum is zero).
pub fn compute_cam(f_last: &Array3<f32>, fc_weights: &Array2<f32>, class_index: usize, out_size: (usize, usize)) -> Result<CamGrid> {
    let (d, h, w) = f_last.dim();
    if fc_weights.ncols() != d {
        bail!(ShapeMismatch, "feature depth {d} does not match fc width {}", fc_weights.ncols());
    }
    if class_index >= fc_weights.nrows() {
        bail!(InvalidArgument, "class index {class_index} out of range");
    }
    if f_last.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "feature maps contain non-finite values");
    }
    let weights = fc_weights.row(class_index);
    let mut raw = Array2::<f64>::zeros((h, w));
    for (wi, fmap) in weights.iter().zip(f_last.axis_iter(Axis(0))) {
        raw.zip_mut_with(&fmap, |acc, &f| *acc += *wi as f64 * f as f64);
    }
    let rectified = raw.mapv(|v| v.max(0.0) as f32);
    let mut cam = resize_grid(&rectified, out_size, ResizeMode::Bilinear)?;
    let max = cam.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        cam.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    } else {
        cam.fill(0.0);
    }
    Ok(cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            image_size: 16,
            channels: vec![4, 6],
            ..Default::default()
        }
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64);
        init_params(&cfg, &mut store, &mut rng).unwrap();
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        for n in names {
            let dims = store.get(&n).unwrap().dims().to_vec();
            store.assign(&n, &Tensor::zeros(dims, DType::F64, &Device::Cpu).unwrap()).unwrap();
        }
        store.assign("cls.fc.b", &Tensor::new(&[0.3f64, -0.3], &Device::Cpu).unwrap()).unwrap();
        let img = ImageGrid::from_shape_fn((16, 16), |(i, j)| ((i * j) % 7) as f32 / 7.0);
        let out = classifier_forward(&img, &cfg, &store).unwrap();
        assert_eq!(out.logits, [0.3, -0.3]);
    }

    #[test]
    fn constant_image_gives_constant_features() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(DType::F64);
        init_params(&cfg, &mut store, &mut rng).unwrap();
        store.assign("cls.stage1.res_a.b", &Tensor::new(&[0.1f64, -0.2, 0.3, 0.0, 0.5, -0.5], &Device::Cpu).unwrap()).unwrap();
        let out = classifier_forward(&ImageGrid::from_elem((16, 16), 0.7), &cfg, &store).unwrap();
        let (d, h, w) = out.f_last.dim();
        assert_eq!((h, w), cfg.feature_size());
        let mut pooled = vec![0.0f64; d];
        for c in 0..d {
            let first = out.f_last[[c, 0, 0]];
            for v in out.f_last.index_axis(Axis(0), c) {
                assert!((v - first).abs() < 1e-6);
            }
            pooled[c] = first as f64;
        }
        let fc = fc_weights(&store).unwrap();
        for k in 0..2 {
            let expect: f64 = (0..d).map(|c| fc[[k, c]] as f64 * pooled[c]).sum();
            assert!((out.logits[k] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_size_is_a_config_error() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(DType::F32);
        init_params(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = classifier_forward(&ImageGrid::zeros((20, 20)), &cfg, &store).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn focal_examples() {
        let ce = focal_loss([0.0, 0.0], 1, 1.0, 0.0).unwrap();
        assert!((ce - 0.5f64.ln().abs()).abs() < 1e-12);
        // p_t = 0.9 exactly: logits (0, ln 9)
        let l = focal_loss([0.0, 9f64.ln()], 1, 0.25, 2.0).unwrap();
        let want = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((l - want).abs() < 1e-15);
        assert!((l - 2.634e-4).abs() < 1e-7);
        let easy = focal_loss([-40.0, 40.0], 1, 0.25, 2.0).unwrap();
        assert!((0.0..1e-30).contains(&easy));
        let hard = focal_loss([800.0, -800.0], 1, 1.0, 0.0).unwrap();
        assert!((hard - 1600.0).abs() < 1e-9);
        assert!(focal_loss([f64::NAN, 0.0], 0, 1.0, 2.0).is_err());
        assert!(focal_loss([0.0, 0.0], 0, 0.0, 2.0).is_err());
    }

    #[test]
    fn tensor_focal_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-6.0..6.0)).collect();
        let labels: Vec<u8> = (0..8).map(|i| (i % 3 == 0) as u8).collect();
        let t = Tensor::from_vec(logits.clone(), (8, 2), &Device::Cpu).unwrap();
        let got = nn::to_host(&focal_loss_tensor(&t, &labels, 0.25, 2.0).unwrap()).unwrap();
        for i in 0..8 {
            let want = focal_loss([logits[2 * i], logits[2 * i + 1]], labels[i], 0.25, 2.0).unwrap();
            assert!((got[i] - want).abs() < 1e-12);
        }
        // gradient exists and is finite at a saturated point
        let v = Var::from_tensor(&Tensor::new(&[[50.0f64, -50.0]], &Device::Cpu).unwrap()).unwrap();
        let g = focal_loss_tensor(&v, &[0], 0.25, 2.0).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(nn::to_host(g.get(&v).unwrap()).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cam_identity_and_cancellation() {
        let f = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f32);
        let w = Array2::from_shape_vec((2, 1), vec![0.0f32, 1.0]).unwrap();
        let cam = compute_cam(&f, &w, 1, (3, 3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((cam[[i, j]] - (i * 3 + j) as f32 / 8.0).abs() < 1e-6);
            }
        }
        let f2 = Array3::from_shape_fn((2, 3, 3), |(_, i, j)| (i + j) as f32);
        let w2 = Array2::from_shape_vec((2, 2), vec![0.0f32, 0.0, 1.0, -1.0]).unwrap();
        let cam = compute_cam(&f2, &w2, 1, (12, 12)).unwrap();
        assert!(cam.iter().all(|&v| v == 0.0));
        let bad = Array2::<f32>::zeros((2, 3));
        assert!(compute_cam(&f2, &bad, 1, (3, 3)).is_err());
    }
}
