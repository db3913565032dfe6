//! Checkpoint directories: `manifest.json` describing every tensor plus a
//! flat little-endian `params.bin`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "sammix-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into `params.bin`.
    pub offset: usize,
    pub numel: usize,
    pub trainable: bool,
    /// `param` for model weights, anything else for auxiliary state such as
    /// optimizer moments.
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    /// Auxiliary tensors keyed by `group/name`.
    pub extra: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => bail!(InvalidArgument, "checkpoints support f32/f64, not {other:?}"),
    }
}

fn push_bytes(buf: &mut Vec<u8>, t: &Tensor, dtype: DType) -> Result<usize> {
    let flat = t.flatten_all()?;
    match dtype {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(flat.elem_count())
}

/// Write `store`, the auxiliary tensors and `meta` into `dir`. Values keep
/// the store's dtype, so a load returns bit-identical tensors.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, extra: &[(&str, &str, &Tensor)], meta: serde_json::Value) -> Result<()> {
    let dtype = store.dtype();
    let dname = dtype_name(dtype)?;
    let mut buf = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    let mut add = |name: &str, group: &str, t: &Tensor, trainable: bool, buf: &mut Vec<u8>| -> Result<()> {
        let t = t.to_dtype(dtype)?;
        let numel = push_bytes(buf, &t, dtype)?;
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            offset,
            numel,
            trainable,
            group: group.to_string(),
        });
        offset += numel;
        Ok(())
    };
    for e in store.entries() {
        add(&e.name, "param", e.slot.tensor(), e.slot.is_trainable(), &mut buf)?;
    }
    for (group, name, t) in extra {
        if *group == "param" {
            bail!(InvalidArgument, "auxiliary tensor {name} may not use the param group");
        }
        add(name, group, t, false, &mut buf)?;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: dname.into(),
        tensors,
        meta,
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(PARAMS_FILE);
    std::fs::write(&bin, &buf).map_err(|e| Error::io(&bin, e))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::MalformedHeader {
            path,
            reason: format!("format {:?} is not {CHECKPOINT_FORMAT}", m.format),
        });
    }
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion {
            found: m.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let (dtype, width) = match m.dtype.as_str() {
        "f32" => (DType::F32, 4),
        "f64" => (DType::F64, 8),
        other => bail!(DataIntegrity, "checkpoint dtype {other:?} is not supported"),
    };
    let bin = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let total: usize = m.tensors.iter().map(|t| t.numel).sum();
    if bytes.len() != total * width {
        bail!(DataIntegrity, "{} holds {} bytes, manifest expects {}", bin.display(), bytes.len(), total * width);
    }
    let mut store = ParamStore::new(dtype);
    let mut extra = BTreeMap::new();
    for rec in &m.tensors {
        if rec.shape.iter().product::<usize>() != rec.numel || (rec.offset + rec.numel) * width > bytes.len() {
            bail!(DataIntegrity, "tensor {} has an inconsistent shape or offset", rec.name);
        }
        let raw = &bytes[rec.offset * width..(rec.offset + rec.numel) * width];
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Tensor::from_vec(v, rec.shape.as_slice(), &Device::Cpu)?
            }
            _ => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Tensor::from_vec(v, rec.shape.as_slice(), &Device::Cpu)?
            }
        };
        if rec.group == "param" {
            store.insert(&rec.name, t, rec.trainable)?;
        } else {
            extra.insert(format!("{}/{}", rec.group, rec.name), t);
        }
    }
    Ok(Checkpoint { store, extra, meta: m.meta })
}
