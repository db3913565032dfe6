//! Synthetic abdominal-CT stand-in.
//!
//! Each volume is an elliptical soft-tissue body in air with one smooth
//! ellipsoidal "organ" occupying a contiguous band of slices, plus a few
//! vessel-like distractor tubes that run through every slice at organ-like
//! intensity. Intensities are in HU so that window-leveling is exercised.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_dataset, save_volumes, split_dir, volume_to_samples, Dataset, PreprocessConfig, RawVolume, Split};
use crate::error::{bail, Result};

/// Generator constants. The defaults are golden: changing any of them
/// changes every pinned dataset checksum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// In-plane size of the generated volume before resizing.
    pub raw_size: usize,
    pub slices: [usize; 2],
    pub spacing_mm: [f64; 3],
    pub air_hu: f64,
    pub body_hu: f64,
    pub organ_hu: f64,
    pub organ_hu_jitter: f64,
    /// Fraction of the volume's slices covered by the organ band.
    pub organ_band: [f64; 2],
    /// Band centre as a fraction of the slice axis.
    pub organ_center: [f64; 2],
    /// Organ semi-minor axis as a fraction of `raw_size`.
    pub organ_radius: [f64; 2],
    pub organ_eccentricity: [f64; 2],
    pub distractor_count: [usize; 2],
    pub distractor_radius: [f64; 2],
    pub distractor_hu: [f64; 2],
    pub noise_sigma: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            raw_size: 288,
            slices: [40, 60],
            spacing_mm: [2.5, 0.8, 0.8],
            air_hu: -1000.0,
            body_hu: 20.0,
            organ_hu: 130.0,
            organ_hu_jitter: 15.0,
            organ_band: [0.25, 0.45],
            organ_center: [0.35, 0.65],
            organ_radius: [0.13, 0.19],
            organ_eccentricity: [1.0, 1.5],
            distractor_count: [1, 3],
            distractor_radius: [0.035, 0.06],
            distractor_hu: [110.0, 190.0],
            noise_sigma: 20.0,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.raw_size < 16 || self.slices[0] < 1 || self.slices[0] > self.slices[1] {
            bail!(Config, "phantom raw_size must be >= 16 and slice range ordered");
        }
        if !(ordered(self.organ_band) && self.organ_band[0] > 0.0 && self.organ_band[1] <= 1.0) {
            bail!(Config, "phantom organ_band must be an ordered range in (0, 1]");
        }
        if !(ordered(self.organ_center) && ordered(self.organ_radius) && ordered(self.organ_eccentricity)) {
            bail!(Config, "phantom ranges must be ordered");
        }
        if !(ordered(self.distractor_radius) && ordered(self.distractor_hu) && self.distractor_count[0] <= self.distractor_count[1]) {
            bail!(Config, "phantom distractor ranges must be ordered");
        }
        if self.noise_sigma < 0.0 || self.val_fraction < 0.0 || self.test_fraction < 0.0 || self.val_fraction + self.test_fraction >= 1.0 {
            bail!(Config, "phantom noise and split fractions must be nonnegative with val+test < 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub volume: RawVolume,
    pub labels: Array3<u8>,
    /// Slices that contain organ pixels.
    pub organ_band: Range<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

pub fn generate_phantom_volume(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<PhantomVolume> {
    cfg.validate()?;
    let n = cfg.raw_size;
    let size = n as f64;
    let slices = rng.random_range(cfg.slices[0]..=cfg.slices[1]);

    let band_len = ((uniform(rng, cfg.organ_band) * slices as f64).round() as usize).clamp(1, slices);
    let centre = uniform(rng, cfg.organ_center) * slices as f64;
    let start = ((centre - band_len as f64 / 2.0).round().max(0.0) as usize).min(slices - band_len);
    let band = start..start + band_len;

    let body = Ellipse {
        cx: size / 2.0,
        cy: size / 2.0,
        a: 0.44 * size,
        b: 0.36 * size,
        cos: 1.0,
        sin: 0.0,
    };
    let radius = uniform(rng, cfg.organ_radius) * size;
    let ecc = uniform(rng, cfg.organ_eccentricity);
    let angle = rng.random_range(0.0..PI);
    let organ_cx = size * rng.random_range(0.38..0.55);
    let organ_cy = size * rng.random_range(0.42..0.58);
    let drift = (rng.random_range(-0.1..0.1) * radius, rng.random_range(-0.1..0.1) * radius);
    let organ_hu = cfg.organ_hu + rng.random_range(-1.0..=1.0) * cfg.organ_hu_jitter;

    // Tubes are placed clear of the organ's largest cross-section.
    let n_tubes = rng.random_range(cfg.distractor_count[0]..=cfg.distractor_count[1]);
    let mut tubes: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(n_tubes);
    let mut attempts = 0;
    while tubes.len() < n_tubes && attempts < 200 {
        attempts += 1;
        let r = uniform(rng, cfg.distractor_radius) * size;
        let x = size * rng.random_range(0.15..0.85);
        let y = size * rng.random_range(0.25..0.75);
        let hu = uniform(rng, cfg.distractor_hu);
        let clear_of_organ = ((x - organ_cx).powi(2) + (y - organ_cy).powi(2)).sqrt() > radius * ecc + r + 0.04 * size;
        let inside_body = body.contains(x, y) && {
            let shrunk = Ellipse { a: body.a - r - 2.0, b: body.b - r - 2.0, ..body };
            shrunk.contains(x, y)
        };
        let clear_of_tubes = tubes
            .iter()
            .all(|&(tx, ty, tr, _)| ((x - tx).powi(2) + (y - ty).powi(2)).sqrt() > tr + r + 2.0);
        if clear_of_organ && inside_body && clear_of_tubes {
            tubes.push((x, y, r, hu));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut voxels = Array3::<f32>::zeros((slices, n, n));
    let mut labels = Array3::<u8>::zeros((slices, n, n));
    let half = band_len as f64 / 2.0;
    let mid = band.start as f64 + half - 0.5;
    for z in 0..slices {
        let organ = band.contains(&z).then(|| {
            let t = (z as f64 - mid) / (1.4 * half.max(0.5));
            let scale = (1.0 - t * t).max(0.0).sqrt();
            let frac = (z as f64 - mid) / half.max(0.5);
            Ellipse {
                cx: organ_cx + drift.0 * frac,
                cy: organ_cy + drift.1 * frac,
                a: radius * ecc * scale,
                b: radius * scale,
                cos: angle.cos(),
                sin: angle.sin(),
            }
        });
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut hu = if body.contains(px, py) { cfg.body_hu } else { cfg.air_hu };
                for &(tx, ty, tr, thu) in &tubes {
                    if (px - tx).powi(2) + (py - ty).powi(2) <= tr * tr {
                        hu = thu;
                    }
                }
                if let Some(e) = &organ {
                    if e.contains(px, py) {
                        hu = organ_hu;
                        labels[[z, y, x]] = 1;
                    }
                }
                let jitter = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                voxels[[z, y, x]] = (hu + jitter) as f32;
            }
        }
    }
    Ok(PhantomVolume {
        volume: RawVolume::new(voxels, cfg.spacing_mm)?,
        labels,
        organ_band: band,
    })
}

fn volume_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Deterministic split of volume indices: `(train, val, test)`.
fn assign_splits(n_volumes: usize, seed: u64, cfg: &PhantomConfig) -> [Vec<usize>; 3] {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n_volumes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    order.shuffle(&mut rng);
    let n_test = (n_volumes as f64 * cfg.test_fraction).round() as usize;
    let n_val = (n_volumes as f64 * cfg.val_fraction).round() as usize;
    let (n_test, n_val) = if n_test + n_val >= n_volumes { (0, 0) } else { (n_test, n_val) };
    let mut test = order[..n_test].to_vec();
    let mut val = order[n_test..n_test + n_val].to_vec();
    let mut train = order[n_test + n_val..].to_vec();
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    [train, val, test]
}

/// Generate `n_volumes` phantoms and preprocess them into train/val/test
/// datasets. When `out_dir` is given, each split is written to
/// `out_dir/<split>/` (and the raw volumes to `out_dir/raw/` if `write_raw`).
pub fn generate_phantoms(
    n_volumes: usize,
    seed: u64,
    phantom: &PhantomConfig,
    preprocess: &PreprocessConfig,
    out_dir: Option<&Path>,
    write_raw: bool,
) -> Result<Vec<Dataset>> {
    if n_volumes < 1 {
        bail!(InvalidArgument, "need at least one phantom volume");
    }
    let assignment = assign_splits(n_volumes, seed, phantom);
    let mut raw = Vec::new();
    let mut datasets = Vec::with_capacity(3);
    for (split, members) in [Split::Train, Split::Val, Split::Test].into_iter().zip(assignment) {
        let mut samples = Vec::new();
        for idx in members {
            let mut rng = volume_rng(seed, idx as u64);
            let pv = generate_phantom_volume(phantom, &mut rng)?;
            let id = format!("vol{idx:03}");
            samples.extend(volume_to_samples(&pv.volume, Some(&pv.labels), preprocess, &id)?);
            if write_raw {
                raw.push((id, pv.volume, Some(pv.labels)));
            }
        }
        datasets.push(Dataset::new(split, samples));
    }
    if let Some(dir) = out_dir {
        for d in &datasets {
            save_dataset(d, &split_dir(dir, d.split))?;
        }
        if write_raw {
            raw.sort_by(|a, b| a.0.cmp(&b.0));
            save_volumes(&dir.join("raw"), &raw)?;
        }
    }
    Ok(datasets)
}
