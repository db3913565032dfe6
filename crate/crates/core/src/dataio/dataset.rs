use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_class_label;
use crate::error::{bail, Error, Result};
use crate::grid::{BinaryMask, ImageGrid};

pub const DATASET_FORMAT: &str = "sammix-dataset";
pub const DATASET_VERSION: u32 = 1;
/// Sidecar file name inside each split directory.
pub const DATASET_HEADER: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => bail!(InvalidArgument, "unknown split {other:?} (expected train, val or test)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub seg_label: Option<BinaryMask>,
    pub cls_label: u8,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.cls_label > 1 {
            bail!(DataIntegrity, "sample {}: class label {} is not binary", self.id, self.cls_label);
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(DataIntegrity, "sample {}: image values must lie in [0, 1]", self.id);
        }
        if let Some(mask) = &self.seg_label {
            if mask.dim() != self.image.dim() {
                bail!(
                    ShapeMismatch,
                    "sample {}: mask {:?} vs image {:?}",
                    self.id,
                    mask.dim(),
                    self.image.dim()
                );
            }
            if mask.iter().any(|&v| v > 1) {
                bail!(DataIntegrity, "sample {}: mask is not binary", self.id);
            }
            if derive_class_label(mask) != self.cls_label {
                bail!(
                    DataIntegrity,
                    "sample {}: class label {} disagrees with its mask",
                    self.id,
                    self.cls_label
                );
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
    /// Ids whose segmentation label may be used as training supervision.
    pub labeled_ids: BTreeSet<String>,
}

impl Dataset {
    pub fn new(split: Split, samples: Vec<Sample>) -> Self {
        Self {
            split,
            samples,
            labeled_ids: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                bail!(DataIntegrity, "duplicate sample id {}", s.id);
            }
        }
        for id in &self.labeled_ids {
            let Some(s) = self.samples.iter().find(|s| &s.id == id) else {
                bail!(DataIntegrity, "labeled id {id} is not a sample of this dataset");
            };
            if s.seg_label.is_none() {
                bail!(DataIntegrity, "labeled id {id} has no segmentation mask");
            }
        }
        Ok(())
    }

    pub fn is_labeled(&self, id: &str) -> bool {
        self.labeled_ids.contains(id)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Choose `n_labeled` positive samples, uniformly over the whole split, to
/// keep segmentation supervision. Everything else stays classification-only.
pub fn split_supervision(dataset: &Dataset, n_labeled: usize, seed: u64) -> Result<Dataset> {
    let mut eligible: Vec<&str> = dataset
        .samples
        .iter()
        .filter(|s| s.cls_label == 1 && s.seg_label.is_some())
        .map(|s| s.id.as_str())
        .collect();
    if n_labeled > eligible.len() {
        return Err(Error::BudgetExceeded {
            requested: n_labeled,
            eligible: eligible.len(),
        });
    }
    eligible.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut out = dataset.clone();
    out.labeled_ids = eligible[..n_labeled].iter().map(|s| s.to_string()).collect();
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    split: Split,
    image_encoding: String,
    mask_encoding: String,
    samples: Vec<SampleEntry>,
    labeled_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    id: String,
    height: usize,
    width: usize,
    cls_label: u8,
    has_mask: bool,
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.f32"))
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}.u8"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write one split: `dataset.json`, `images/<id>.f32` (little-endian f32,
/// row-major) and `masks/<id>.u8`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            bail!(InvalidArgument, "sample id {:?} is not a valid file stem", s.id);
        }
        let (h, w) = s.dims();
        let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        write(&image_path(dir, &s.id), &bytes)?;
        if let Some(mask) = &s.seg_label {
            let bytes: Vec<u8> = mask.iter().copied().collect();
            write(&mask_path(dir, &s.id), &bytes)?;
        }
        entries.push(SampleEntry {
            id: s.id.clone(),
            height: h,
            width: w,
            cls_label: s.cls_label,
            has_mask: s.seg_label.is_some(),
        });
    }
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        split: dataset.split,
        image_encoding: "f32le".to_string(),
        mask_encoding: "u8".to_string(),
        samples: entries,
        labeled_ids: dataset.labeled_ids.iter().cloned().collect(),
    };
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    write(&dir.join(DATASET_HEADER), json.as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let header_path = dir.join(DATASET_HEADER);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: header_path.clone(),
        reason,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::UnknownVersion {
                found: v as u32,
                supported: DATASET_VERSION,
            })
        }
        None => return Err(malformed("missing integer field `version`".into())),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if header.format != DATASET_FORMAT {
        return Err(malformed(format!("format is {:?}, expected {DATASET_FORMAT:?}", header.format)));
    }
    if header.image_encoding != "f32le" || header.mask_encoding != "u8" {
        return Err(malformed("unsupported payload encoding".into()));
    }

    let mut samples = Vec::with_capacity(header.samples.len());
    for entry in &header.samples {
        let n = entry.height * entry.width;
        let path = image_path(dir, &entry.id);
        let bytes = read(&path)?;
        if bytes.len() != n * 4 {
            bail!(
                ShapeMismatch,
                "{}: header declares {}x{} ({} bytes) but payload has {} bytes",
                path.display(),
                entry.height,
                entry.width,
                n * 4,
                bytes.len()
            );
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let image = Array2::from_shape_vec((entry.height, entry.width), values)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let seg_label = if entry.has_mask {
            let path = mask_path(dir, &entry.id);
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    bail!(DataIntegrity, "mask file {} for sample {} is missing", path.display(), entry.id)
                }
                Err(e) => return Err(Error::io(&path, e)),
            };
            if bytes.len() != n {
                bail!(
                    ShapeMismatch,
                    "{}: header declares {} mask bytes but payload has {}",
                    path.display(),
                    n,
                    bytes.len()
                );
            }
            Some(Array2::from_shape_vec((entry.height, entry.width), bytes).map_err(|e| Error::ShapeMismatch(e.to_string()))?)
        } else {
            None
        };
        samples.push(Sample {
            id: entry.id.clone(),
            image,
            seg_label,
            cls_label: entry.cls_label,
        });
    }
    let dataset = Dataset {
        split: header.split,
        samples,
        labeled_ids: header.labeled_ids.into_iter().collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}
