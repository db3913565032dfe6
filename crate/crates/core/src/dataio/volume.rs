//! Raw HU volume directory: `volumes.json` plus `<id>.hu.f32` and optional
//! `<id>.label.u8` payloads (little-endian, slice-major, row-major).

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::RawVolume;
use crate::error::{bail, Error, Result};

pub const VOLUME_HEADER: &str = "volumes.json";
pub const VOLUME_VERSION: u32 = 1;
const VOLUME_FORMAT: &str = "sammix-volumes";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    volumes: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: String,
    slices: usize,
    height: usize,
    width: usize,
    spacing_mm: [f64; 3],
    has_labels: bool,
}

pub fn save_volumes(dir: &Path, volumes: &[(String, RawVolume, Option<Array3<u8>>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (id, vol, labels) in volumes {
        let (s, h, w) = vol.voxels.dim();
        let bytes: Vec<u8> = vol.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join(format!("{id}.hu.f32"));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        if let Some(labels) = labels {
            if labels.dim() != (s, h, w) {
                bail!(ShapeMismatch, "labels for {id} are {:?}, volume is {:?}", labels.dim(), (s, h, w));
            }
            let p = dir.join(format!("{id}.label.u8"));
            fs::write(&p, labels.iter().copied().collect::<Vec<u8>>()).map_err(|e| Error::io(&p, e))?;
        }
        entries.push(Entry {
            id: id.clone(),
            slices: s,
            height: h,
            width: w,
            spacing_mm: vol.spacing,
            has_labels: labels.is_some(),
        });
    }
    let header = Header {
        format: VOLUME_FORMAT.into(),
        version: VOLUME_VERSION,
        volumes: entries,
    };
    let p = dir.join(VOLUME_HEADER);
    let mut json = serde_json::to_string_pretty(&header)?;
    json.push('\n');
    fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

pub fn load_volumes(dir: &Path) -> Result<Vec<(String, RawVolume, Option<Array3<u8>>)>> {
    let hp = dir.join(VOLUME_HEADER);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: hp.clone(),
        reason: e.to_string(),
    })?;
    if header.version != VOLUME_VERSION {
        return Err(Error::UnknownVersion {
            found: header.version,
            supported: VOLUME_VERSION,
        });
    }
    if header.format != VOLUME_FORMAT {
        return Err(Error::MalformedHeader {
            path: hp,
            reason: format!("format is {:?}", header.format),
        });
    }
    header
        .volumes
        .into_iter()
        .map(|e| {
            let dims = (e.slices, e.height, e.width);
            let n = e.slices * e.height * e.width;
            let p = dir.join(format!("{}.hu.f32", e.id));
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            if bytes.len() != 4 * n {
                bail!(ShapeMismatch, "{}: expected {} bytes, found {}", p.display(), 4 * n, bytes.len());
            }
            let voxels: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let volume = RawVolume::new(
                Array3::from_shape_vec(dims, voxels).map_err(|err| Error::ShapeMismatch(err.to_string()))?,
                e.spacing_mm,
            )?;
            let labels = if e.has_labels {
                let p = dir.join(format!("{}.label.u8", e.id));
                let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
                if bytes.len() != n {
                    bail!(ShapeMismatch, "{}: expected {} bytes, found {}", p.display(), n, bytes.len());
                }
                Some(Array3::from_shape_vec(dims, bytes).map_err(|err| Error::ShapeMismatch(err.to_string()))?)
            } else {
                None
            };
            Ok((e.id, volume, labels))
        })
        .collect()
}
