use std::path::Path;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, Moments};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::classifier::{self, ClassifierConfig};
use crate::error::{bail, Error, Result};
use crate::params::ParamStore;
use crate::promptgen::ThresholdConfig;
use crate::segnet::{self, SegnetConfig};

/// Classifier and segmenter sharing one parameter store.
///
/// Not `Clone`: trainable parameters are shared variables, so a shallow copy
/// would alias them. Use [`Model::clone_deep`].
#[derive(Debug)]
pub struct Model {
    pub classifier: ClassifierConfig,
    pub segnet: SegnetConfig,
    pub threshold: ThresholdConfig,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    classifier: ClassifierConfig,
    segnet: SegnetConfig,
    threshold: ThresholdConfig,
    optimizer: Option<OptimizerMeta>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: std::collections::BTreeMap<String, u64>,
}

impl Model {
    pub fn init(classifier: ClassifierConfig, segnet: SegnetConfig, threshold: ThresholdConfig, seed: u64, dtype: DType) -> Result<Self> {
        classifier.validate()?;
        segnet.validate()?;
        threshold.validate()?;
        if classifier.image_size != segnet.image_size {
            bail!(Config, "classifier and segmenter image sizes differ ({} vs {})", classifier.image_size, segnet.image_size);
        }
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        classifier::init_params(&classifier, &mut store, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        segnet::init_params(&segnet, &mut store, &mut rng)?;
        Ok(Self {
            classifier,
            segnet,
            threshold,
            store,
        })
    }

    pub fn clone_deep(&self) -> Result<Self> {
        Ok(Self {
            classifier: self.classifier.clone(),
            segnet: self.segnet.clone(),
            threshold: self.threshold.clone(),
            store: self.store.deep_clone()?,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.classifier.image_size, self.classifier.image_size)
    }

    pub fn save(&self, dir: &Path, optimizer: Option<&AdamW>, extra: serde_json::Value) -> Result<()> {
        let mut aux = Vec::new();
        if let Some(opt) = optimizer {
            for (name, st) in &opt.state {
                aux.push(("opt.m", name.as_str(), &st.m));
                aux.push(("opt.v", name.as_str(), &st.v));
            }
        }
        let meta = ModelMeta {
            classifier: self.classifier.clone(),
            segnet: self.segnet.clone(),
            threshold: self.threshold.clone(),
            optimizer: optimizer.map(|o| OptimizerMeta {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                steps: o.state.iter().map(|(k, s)| (k.clone(), s.steps)).collect(),
            }),
            extra,
        };
        save_checkpoint(dir, &self.store, &aux, serde_json::to_value(meta)?)
    }

    /// Load a model and, when present, its optimizer state and extra meta.
    pub fn load(dir: &Path) -> Result<(Self, Option<AdamW>, serde_json::Value)> {
        let ck = load_checkpoint(dir)?;
        let meta: ModelMeta = serde_json::from_value(ck.meta).map_err(|e| Error::MalformedHeader {
            path: dir.to_path_buf(),
            reason: format!("checkpoint meta: {e}"),
        })?;
        let optimizer = match meta.optimizer {
            None => None,
            Some(o) => {
                let mut opt = AdamW::new(o.beta1, o.beta2, o.eps, o.weight_decay);
                for (name, steps) in o.steps {
                    let (Some(m), Some(v)) = (ck.extra.get(&format!("opt.m/{name}")), ck.extra.get(&format!("opt.v/{name}"))) else {
                        bail!(DataIntegrity, "optimizer moments for {name} are missing");
                    };
                    opt.state.insert(name, Moments { m: m.clone(), v: v.clone(), steps });
                }
                Some(opt)
            }
        };
        let model = Self {
            classifier: meta.classifier,
            segnet: meta.segnet,
            threshold: meta.threshold,
            store: ck.store,
        };
        Ok((model, optimizer, meta.extra))
    }
}
