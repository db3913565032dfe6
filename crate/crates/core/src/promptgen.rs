//! CAM → binary mask → connected regions → bounding-box prompts.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::{BinaryMask, CamGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `τ = ω · max(cam)`.
    Relative,
    /// `τ = ω`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub omega: f32,
    pub threshold_mode: ThresholdMode,
    pub connectivity: Connectivity,
    pub min_area_px: usize,
    pub max_boxes: usize,
    /// Collapse all surviving boxes into their common bounding box.
    pub merge_boxes: bool,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            threshold_mode: ThresholdMode::Relative,
            connectivity: Connectivity::Eight,
            min_area_px: 9,
            max_boxes: 3,
            merge_boxes: false,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            bail!(Config, "omega must lie in (0, 1], got {}", self.omega);
        }
        if self.max_boxes == 0 {
            bail!(Config, "max_boxes must be positive");
        }
        Ok(())
    }
}

/// Inclusive pixel box plus the pixel count of the region it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
    #[serde(rename = "area")]
    pub area_px: usize,
}

impl BoxPrompt {
    pub fn fits(&self, (h, w): (usize, usize)) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && self.x_max < w && self.y_max < h
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    /// Tight box around the foreground of `mask`, if any.
    pub fn enclosing(mask: &BinaryMask) -> Option<Self> {
        let mut out: Option<Self> = None;
        for ((y, x), &v) in mask.indexed_iter() {
            if v == 0 {
                continue;
            }
            let b = out.get_or_insert(Self {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
                area_px: 0,
            });
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
            b.area_px += 1;
        }
        out
    }
}

/// One connected foreground component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// 1-based id, equal to the value written into the label grid.
    pub id: u32,
    pub area: usize,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regions {
    /// `0` for background, otherwise the owning region's id.
    pub labels: Array2<u32>,
    /// Sorted by area (descending), then `(y_min, x_min)`.
    pub regions: Vec<Region>,
}

pub fn threshold_value(cam: &CamGrid, cfg: &ThresholdConfig) -> f32 {
    match cfg.threshold_mode {
        ThresholdMode::Relative => cfg.omega * cam.iter().copied().fold(0.0f32, f32::max),
        ThresholdMode::Absolute => cfg.omega,
    }
}

/// `mask(p) = 1` iff `cam(p) ≥ τ`; an all-zero CAM gives an all-zero mask.
pub fn threshold_cam(cam: &CamGrid, cfg: &ThresholdConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    if cam.iter().any(|v| !v.is_finite() || *v < 0.0) {
        bail!(InvalidArgument, "CAM values must be finite and nonnegative");
    }
    let max = cam.iter().copied().fold(0.0f32, f32::max);
    if max == 0.0 {
        return Ok(BinaryMask::zeros(cam.dim()));
    }
    let tau = threshold_value(cam, cfg);
    Ok(cam.mapv(|v| u8::from(v >= tau)))
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let (ra, rb) = (find(parent, a), find(parent, b));
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// Two-pass union-find component labeling.
pub fn label_regions(mask: &BinaryMask, connectivity: Connectivity) -> Regions {
    let (h, w) = mask.dim();
    let mut provisional = Array2::<u32>::zeros((h, w));
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut k = 0;
            let mut push = |v: u32| {
                if v != 0 {
                    neighbours[k] = v;
                    k += 1;
                }
            };
            if x > 0 {
                push(provisional[[y, x - 1]]);
            }
            if y > 0 {
                push(provisional[[y - 1, x]]);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        push(provisional[[y - 1, x - 1]]);
                    }
                    if x + 1 < w {
                        push(provisional[[y - 1, x + 1]]);
                    }
                }
            }
            provisional[[y, x]] = if k == 0 {
                let id = parent.len() as u32;
                parent.push(id);
                id
            } else {
                let mut root = neighbours[0];
                for &n in &neighbours[1..k] {
                    root = union(&mut parent, root, n);
                }
                find(&mut parent, root)
            };
        }
    }

    // Second pass: gather per-root statistics.
    let mut stats: Vec<Option<Region>> = vec![None; parent.len()];
    for ((y, x), &p) in provisional.indexed_iter() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p);
        let r = stats[root as usize].get_or_insert(Region {
            id: root,
            area: 0,
            x_min: x,
            y_min: y,
            x_max: x,
            y_max: y,
        });
        r.area += 1;
        r.x_min = r.x_min.min(x);
        r.x_max = r.x_max.max(x);
        r.y_min = r.y_min.min(y);
        r.y_max = r.y_max.max(y);
    }
    let mut regions: Vec<Region> = stats.into_iter().flatten().collect();
    regions.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.y_min.cmp(&b.y_min))
            .then(a.x_min.cmp(&b.x_min))
    });
    let mut relabel = vec![0u32; parent.len()];
    for (i, r) in regions.iter_mut().enumerate() {
        relabel[r.id as usize] = i as u32 + 1;
        r.id = i as u32 + 1;
    }
    let labels = provisional.mapv(|p| if p == 0 { 0 } else { relabel[find(&mut parent, p) as usize] });
    Regions { labels, regions }
}

/// Per-region tight boxes; regions below `min_area_px` are dropped and at
/// most `max_boxes` (largest first) are kept.
pub fn extract_boxes(regions: &Regions, cfg: &ThresholdConfig) -> Vec<BoxPrompt> {
    let boxes: Vec<BoxPrompt> = regions
        .regions
        .iter()
        .filter(|r| r.area >= cfg.min_area_px)
        .take(cfg.max_boxes)
        .map(|r| BoxPrompt {
            x_min: r.x_min,
            y_min: r.y_min,
            x_max: r.x_max,
            y_max: r.y_max,
            area_px: r.area,
        })
        .collect();
    if cfg.merge_boxes && boxes.len() > 1 {
        let merged = boxes.iter().skip(1).fold(boxes[0], |acc, b| BoxPrompt {
            x_min: acc.x_min.min(b.x_min),
            y_min: acc.y_min.min(b.y_min),
            x_max: acc.x_max.max(b.x_max),
            y_max: acc.y_max.max(b.y_max),
            area_px: acc.area_px + b.area_px,
        });
        return vec![merged];
    }
    boxes
}

/// Full prompt-generation chain for one CAM.
pub fn cam_to_boxes(cam: &CamGrid, cfg: &ThresholdConfig) -> Result<Vec<BoxPrompt>> {
    let mask = threshold_cam(cam, cfg)?;
    Ok(extract_boxes(&label_regions(&mask, cfg.connectivity), cfg))
}

/// `(x_min/W, y_min/H, x_max/W, y_max/H)` per box, order preserved.
pub fn boxes_to_prompt_coords(boxes: &[BoxPrompt], image_size: (usize, usize)) -> Result<Vec<[f64; 4]>> {
    let (h, w) = image_size;
    boxes
        .iter()
        .map(|b| {
            if !b.fits(image_size) {
                bail!(InvalidArgument, "box {b:?} does not fit a {h}x{w} image");
            }
            Ok([
                b.x_min as f64 / w as f64,
                b.y_min as f64 / h as f64,
                b.x_max as f64 / w as f64,
                b.y_max as f64 / h as f64,
            ])
        })
        .collect()
}

/// Inverse of [`boxes_to_prompt_coords`] for the corner coordinates.
pub fn prompt_coords_to_pixels(coords: &[f64; 4], image_size: (usize, usize)) -> [f64; 4] {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    [coords[0] * w, coords[1] * h, coords[2] * w, coords[3] * h]
}

/// JSON record used by debugging and overlay tooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub id: String,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
    pub area: usize,
}

pub fn box_records(sample_id: &str, boxes: &[BoxPrompt]) -> Vec<BoxRecord> {
    boxes
        .iter()
        .map(|b| BoxRecord {
            id: sample_id.to_string(),
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            area: b.area_px,
        })
        .collect()
}
