//! Named parameter storage shared by the classifier and the segmenter.
//!
//! Trainable entries are candle [`Var`]s, so autograd tracks them; frozen
//! entries are plain tensors and never receive a gradient.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};

#[derive(Debug, Clone)]
pub enum Slot {
    Trainable(Var),
    Frozen(Tensor),
}

impl Slot {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Slot::Trainable(v) => v.as_tensor(),
            Slot::Frozen(t) => t,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Slot::Trainable(_))
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub slot: Slot,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            bail!(Config, "parameter {name} registered twice");
        }
        let tensor = tensor.to_dtype(self.dtype)?;
        let slot = if trainable {
            Slot::Trainable(Var::from_tensor(&tensor)?)
        } else {
            Slot::Frozen(tensor.detach())
        };
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            slot,
        });
        Ok(())
    }

    /// Register `shape` filled from `N(0, std²)` drawn on the host RNG.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| crate::Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?, trainable)
    }

    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, trainable: bool, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?, trainable)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::from_vec(vec![value; n], shape, &Device::Cpu)?, trainable)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(self.entries[i].slot.tensor()),
            None => bail!(Config, "missing parameter {name}"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.index.get(name).map(|&i| &self.entries[i].slot)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().filter_map(|e| match &e.slot {
            Slot::Trainable(v) => Some((e.name.as_str(), v)),
            Slot::Frozen(_) => None,
        })
    }

    /// Number of trainable scalars among entries whose name starts with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.slot.is_trainable() && e.name.starts_with(prefix))
            .map(|e| e.slot.tensor().elem_count())
            .sum()
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.slot.tensor().elem_count())
            .sum()
    }

    /// Freeze or unfreeze every entry under `prefix`. Values are preserved.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.slot = match (&e.slot, trainable) {
                (Slot::Frozen(t), true) => Slot::Trainable(Var::from_tensor(&t.copy()?)?),
                (Slot::Trainable(v), false) => Slot::Frozen(v.as_tensor().copy()?.detach()),
                (slot, _) => slot.clone(),
            };
        }
        Ok(())
    }

    /// Overwrite the value of an existing entry (shape must match).
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let Some(&i) = self.index.get(name) else {
            bail!(Config, "missing parameter {name}");
        };
        let value = value.to_dtype(self.dtype)?;
        let entry = &mut self.entries[i];
        if entry.slot.tensor().dims() != value.dims() {
            bail!(
                ShapeMismatch,
                "parameter {name}: expected {:?}, got {:?}",
                entry.slot.tensor().dims(),
                value.dims()
            );
        }
        match &entry.slot {
            Slot::Trainable(v) => v.set(&value)?,
            Slot::Frozen(_) => entry.slot = Slot::Frozen(value.copy()?.detach()),
        }
        Ok(())
    }

    /// Deep copy; variables in the copy do not alias the original storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for e in &self.entries {
            out.insert(&e.name, e.slot.tensor().copy()?, e.slot.is_trainable())?;
        }
        Ok(out)
    }

    /// Same parameters re-materialized in another dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype);
        for e in &self.entries {
            out.insert(&e.name, e.slot.tensor().to_dtype(dtype)?, e.slot.is_trainable())?;
        }
        Ok(out)
    }

    /// Flattened host copy of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }
}
