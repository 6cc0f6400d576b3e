//! JSON checkpoints: named parameter arrays with shapes, a config echo, and
//! a SHA-256 digest over every parameter's name, shape and bits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::slice_aware::{AttentionConfig, SliceAwareModel, SliceHeads, SliceOptions};

use super::config::ModelKind;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Slice-extension settings stored alongside its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEcho {
    pub monitored_intents: Vec<String>,
    pub attention: AttentionConfig,
    pub options: SliceOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub backbone: BackboneConfig,
    pub slice: Option<SliceEcho>,
    /// Experiment configuration text the model was trained with.
    pub config: String,
    pub param_hash: String,
    pub arrays: Vec<NamedArray>,
}

/// A trained routing model of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Backbone(BackboneParams),
    SliceAware(SliceAwareModel),
}

impl Model {
    pub fn backbone(&self) -> &BackboneParams {
        match self {
            Model::Backbone(b) => b,
            Model::SliceAware(m) => &m.backbone,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            Model::Backbone(b) => b.named(),
            Model::SliceAware(m) => m.named(),
        }
    }

    pub fn param_hash(&self) -> String {
        param_hash(&self.named())
    }
}

pub fn param_hash(named: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in t.values() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn restore(target: Vec<&mut Tensor>, names: Vec<String>, arrays: &mut std::collections::HashMap<String, NamedArray>) -> Result<()> {
    for (t, name) in target.into_iter().zip(names) {
        let a = arrays
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if a.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, expected {:?}",
                a.shape,
                t.shape()
            )));
        }
        *t = Tensor::new(&a.shape, a.values).map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &Model, kind: ModelKind, config_text: &str) -> Self {
        let named = model.named();
        let slice = match model {
            Model::Backbone(_) => None,
            Model::SliceAware(m) => Some(SliceEcho {
                monitored_intents: Vec::new(),
                attention: m.attention,
                options: m.options.clone(),
            }),
        };
        Self {
            format_version: CHECKPOINT_VERSION,
            kind,
            backbone: model.backbone().config.clone(),
            slice,
            config: config_text.to_string(),
            param_hash: param_hash(&named),
            arrays: named
                .iter()
                .map(|(n, t)| NamedArray {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn with_slices(mut self, monitored: &[String]) -> Self {
        if let Some(s) = self.slice.as_mut() {
            s.monitored_intents = monitored.to_vec();
        }
        self
    }

    /// Rebuilds the model and checks the stored digest.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        let mut arrays: std::collections::HashMap<String, NamedArray> =
            self.arrays.iter().map(|a| (a.name.clone(), a.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut backbone = BackboneParams::init(self.backbone.clone(), &mut rng)?;
        let names: Vec<String> = backbone.named().into_iter().map(|(n, _)| n).collect();
        restore(backbone.tensors_mut(), names, &mut arrays)?;
        let model = match &self.slice {
            None => Model::Backbone(backbone),
            Some(echo) => {
                let get_shape = |n: &str| arrays.get(n).map(|a| a.shape.clone());
                let (k, d) = match get_shape("slice.indicator_weight").as_deref() {
                    Some(&[d, k]) => (k, d),
                    _ => return Err(Error::Checkpoint("missing or malformed slice.indicator_weight".into())),
                };
                let mut heads = SliceHeads::zeros(k, d, echo.options.max_hypotheses);
                let names: Vec<String> = heads.named().into_iter().map(|(n, _)| n).collect();
                restore(heads.tensors_mut(), names, &mut arrays)?;
                Model::SliceAware(SliceAwareModel {
                    backbone,
                    heads,
                    attention: echo.attention,
                    options: echo.options.clone(),
                })
            }
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra}")));
        }
        let hash = model.param_hash();
        if hash != self.param_hash {
            return Err(Error::Checkpoint(format!(
                "parameter digest mismatch: stored {}, computed {hash}",
                self.param_hash
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    }
}
