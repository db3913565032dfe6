//! Fixtures and brute-force reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;

use candle_core::DType;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sammix::classifier::ClassifierConfig;
use sammix::config::ExperimentConfig;
use sammix::dataio::{generate_phantoms, Dataset, Sample, Split};
use sammix::promptgen::{Connectivity, ThresholdConfig, ThresholdMode};
use sammix::segnet::{Projection, SegnetConfig};
use sammix::trainer::Model;
use sammix::{BinaryMask, CamGrid};

/// Print straight to the process stdout so the line survives the test
/// harness's output capture.
pub fn report(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] {name}: {detail}");
    let _ = out.flush();
}

pub fn desk() -> ExperimentConfig {
    ExperimentConfig::desk()
}

/// `[train, val, test]` phantom splits at desk resolution.
pub fn phantom_splits(n_volumes: usize, seed: u64) -> Vec<Dataset> {
    let cfg = desk();
    generate_phantoms(n_volumes, seed, &cfg.phantom, &cfg.preprocess, None, false).expect("phantoms")
}

// ---------------------------------------------------------------- oracles

pub fn oracle_threshold(cam: &CamGrid, cfg: &ThresholdConfig) -> BinaryMask {
    let mut max = 0.0f32;
    for &v in cam.iter() {
        if v > max {
            max = v;
        }
    }
    if max == 0.0 {
        return BinaryMask::zeros(cam.dim());
    }
    let tau = match cfg.threshold_mode {
        ThresholdMode::Relative => cfg.omega * max,
        ThresholdMode::Absolute => cfg.omega,
    };
    let (h, w) = cam.dim();
    let mut out = BinaryMask::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if cam[[y, x]] >= tau {
                out[[y, x]] = 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRegion {
    pub pixels: Vec<(usize, usize)>,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

/// Breadth-first flood fill from every unvisited foreground pixel in raster
/// order, sorted by area (desc), then top edge, then left edge.
pub fn oracle_regions(mask: &BinaryMask, conn: Connectivity) -> Vec<OracleRegion> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let steps: Vec<(i64, i64)> = match conn {
        Connectivity::Four => vec![(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx))).filter(|&s| s != (0, 0)).collect(),
    };
    let mut regions = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if mask[[y0, x0]] == 0 || seen[[y0, x0]] {
                continue;
            }
            let mut queue = VecDeque::from([(y0, x0)]);
            seen[[y0, x0]] = true;
            let mut pixels = Vec::new();
            while let Some((y, x)) = queue.pop_front() {
                pixels.push((y, x));
                for &(dy, dx) in &steps {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] != 0 && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            regions.push(OracleRegion {
                x_min: pixels.iter().map(|p| p.1).min().unwrap(),
                x_max: pixels.iter().map(|p| p.1).max().unwrap(),
                y_min: pixels.iter().map(|p| p.0).min().unwrap(),
                y_max: pixels.iter().map(|p| p.0).max().unwrap(),
                pixels,
            });
        }
    }
    regions.sort_by(|a, b| b.pixels.len().cmp(&a.pixels.len()).then(a.y_min.cmp(&b.y_min)).then(a.x_min.cmp(&b.x_min)));
    regions
}

/// `(x_min, y_min, x_max, y_max, area)` of the surviving prompts.
pub fn oracle_boxes(regions: &[OracleRegion], cfg: &ThresholdConfig) -> Vec<(usize, usize, usize, usize, usize)> {
    let mut kept = Vec::new();
    for r in regions {
        if kept.len() == cfg.max_boxes {
            break;
        }
        if r.pixels.len() >= cfg.min_area_px {
            kept.push((r.x_min, r.y_min, r.x_max, r.y_max, r.pixels.len()));
        }
    }
    if cfg.merge_boxes && kept.len() > 1 {
        let mut m = kept[0];
        for b in &kept[1..] {
            m = (m.0.min(b.0), m.1.min(b.1), m.2.max(b.2), m.3.max(b.3), m.4 + b.4);
        }
        return vec![m];
    }
    kept
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn oracle_boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[[y as usize, x as usize]] != 0;
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// All-pairs symmetric boundary Hausdorff distance.
pub fn oracle_hausdorff(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let dist = |p: (usize, usize), q: (usize, usize)| {
        let dy = p.0 as f64 - q.0 as f64;
        let dx = p.1 as f64 - q.1 as f64;
        (dy * dy + dx * dx).sqrt()
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&ba, &bb).max(directed(&bb, &ba)))
}

/// Hand-counted `2|A∩B| / (|A|+|B|)`, 1 for two empty masks.
pub fn oracle_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for y in 0..a.nrows() {
        for x in 0..a.ncols() {
            let (p, q) = (a[[y, x]] == 1, b[[y, x]] == 1);
            if p {
                na += 1;
            }
            if q {
                nb += 1;
            }
            if p && q {
                inter += 1;
            }
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

// ------------------------------------------------------------- generators

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    match rng.random_range(0..3) {
        0 => {
            let p: f64 = rng.random_range(0.1..0.9);
            Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(p)))
        }
        1 => BinaryMask::zeros((h, w)),
        _ => {
            let mut m = BinaryMask::zeros((h, w));
            for _ in 0..rng.random_range(1..4) {
                let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
                m.slice_mut(ndarray::s![y0..=y1, x0..=x1]).fill(1);
            }
            m
        }
    }
}

/// Random CAM: speckle, sums of Gaussian bumps, or constant/zero maps.
pub fn random_cam(rng: &mut ChaCha8Rng) -> CamGrid {
    let h = rng.random_range(8..=32);
    let w = rng.random_range(8..=32);
    match rng.random_range(0..10) {
        0 => CamGrid::zeros((h, w)),
        1 => CamGrid::from_elem((h, w), rng.random_range(0.1..1.0)),
        2..=4 => Array2::from_shape_fn((h, w), |_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0f32) }),
        _ => {
            let bumps: Vec<(f32, f32, f32, f32)> = (0..rng.random_range(1..5))
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f32),
                        rng.random_range(0.0..w as f32),
                        rng.random_range(1.0..6.0),
                        rng.random_range(0.2..1.0),
                    )
                })
                .collect();
            Array2::from_shape_fn((h, w), |(y, x)| {
                bumps
                    .iter()
                    .map(|&(cy, cx, s, a)| a * (-((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)) / (2.0 * s * s)).exp())
                    .sum()
            })
        }
    }
}

pub fn random_threshold_cfg(rng: &mut ChaCha8Rng) -> ThresholdConfig {
    ThresholdConfig {
        omega: rng.random_range(0.05..=1.0),
        threshold_mode: if rng.random_bool(0.7) { ThresholdMode::Relative } else { ThresholdMode::Absolute },
        connectivity: if rng.random_bool(0.5) { Connectivity::Four } else { Connectivity::Eight },
        min_area_px: rng.random_range(1..12),
        max_boxes: rng.random_range(1..5),
        merge_boxes: rng.random_bool(0.25),
    }
}

/// A small random but valid model shape for gradient and contract checks.
pub fn tiny_configs(rng: &mut ChaCha8Rng) -> (ClassifierConfig, SegnetConfig) {
    let image_size = [12usize, 16][rng.random_range(0..2)];
    let cls = ClassifierConfig {
        image_size,
        channels: (0..rng.random_range(1..3)).map(|_| rng.random_range(2..5)).collect(),
        focal_alpha: rng.random_range(0.1..1.0),
        focal_gamma: [0.0, 1.0, 2.0, 2.5][rng.random_range(0..4)],
        ..ClassifierConfig::default()
    };
    let heads = [1usize, 2][rng.random_range(0..2)];
    let dim = [8usize, 12][rng.random_range(0..2)];
    let targets = match rng.random_range(0..3) {
        0 => vec![Projection::Q, Projection::V],
        1 => vec![Projection::Q, Projection::K, Projection::V, Projection::Out],
        _ => vec![Projection::V],
    };
    let seg = SegnetConfig {
        image_size,
        patch_size: 4,
        dim,
        depth: rng.random_range(1..3),
        heads,
        mlp_ratio: 2,
        lora_rank: rng.random_range(1..4),
        lora_targets: targets,
        num_masks: rng.random_range(1..4),
        decoder_depth: rng.random_range(1..3),
        decoder_heads: heads,
        upscale_channels: rng.random_range(2..5),
        image_skip: rng.random_bool(0.5),
        ..SegnetConfig::default()
    };
    (cls, seg)
}

pub fn tiny_model(rng: &mut ChaCha8Rng, dtype: DType) -> Model {
    let (cls, seg) = tiny_configs(rng);
    let threshold = ThresholdConfig {
        min_area_px: 1,
        ..ThresholdConfig::default()
    };
    Model::init(cls, seg, threshold, rng.random(), dtype).expect("tiny model")
}

/// Bright ellipse on a dim noisy background; `organ = false` gives a
/// negative sample with no mask foreground.
pub fn toy_sample(id: &str, size: usize, organ: bool, rng: &mut ChaCha8Rng) -> Sample {
    let (cy, cx) = (rng.random_range(0.35..0.65) * size as f64, rng.random_range(0.35..0.65) * size as f64);
    let r = rng.random_range(0.15..0.3) * size as f64;
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        u8::from(organ && d <= r)
    });
    let image = Array2::from_shape_fn((size, size), |(y, x)| {
        let base = rng.random_range(0.1..0.3f32);
        if mask[[y, x]] == 1 {
            base + 0.6
        } else {
            base
        }
    });
    Sample {
        id: id.to_string(),
        image,
        seg_label: Some(mask),
        cls_label: u8::from(organ),
    }
}

pub fn toy_dataset(n_pos: usize, n_neg: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Sample> = (0..n_pos).map(|i| toy_sample(&format!("p{i:02}"), size, true, &mut rng)).collect();
    samples.extend((0..n_neg).map(|i| toy_sample(&format!("n{i:02}"), size, false, &mut rng)));
    Dataset::new(Split::Train, samples)
}

pub fn labeled(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}
