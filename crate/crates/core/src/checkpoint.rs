//! Checkpoint files.
//!
//! Layout: one line of compact JSON (the header), a `\n`, then every tensor
//! listed in the header as little-endian `f64`, in header order. Parameters
//! come first; when optimizer state is present it follows as
//! `adam.m.<name>` and `adam.v.<name>` entries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LgnModel, ModelConfig, ParamStore, EMBEDDING};
use crate::tensor::Tensor;
use crate::text::{Vocabulary, PAD_ID};
use crate::train::{AdamHyper, AdamState};

const FORMAT: &str = "lgn-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    #[serde(flatten)]
    hyper: AdamHyper,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    epochs_completed: usize,
    /// Parameters excluded from optimisation.
    frozen: Vec<String>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<Entry>,
}

/// A model with optional optimizer state and training progress.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LgnModel,
    pub optimizer: Option<AdamState>,
    pub epochs_completed: usize,
}

impl Checkpoint {
    pub fn from_model(model: LgnModel) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epochs_completed: 0,
        }
    }

    /// Serialises to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let mut tensors: Vec<(String, &Tensor)> = params.iter().map(|p| (p.name().to_string(), p.tensor())).collect();
        if let Some(opt) = &self.optimizer {
            for (p, m) in params.iter().zip(opt.first_moments()) {
                tensors.push((format!("adam.m.{}", p.name()), m));
            }
            for (p, v) in params.iter().zip(opt.second_moments()) {
                tensors.push((format!("adam.v.{}", p.name()), v));
            }
        }
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            config: self.model.config().clone(),
            vocab: self.model.vocab().clone(),
            epochs_completed: self.epochs_completed,
            frozen: params.iter().filter(|p| !p.trainable()).map(|p| p.name().to_string()).collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step(),
                hyper: o.hyper(),
            }),
            tensors: tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}` version {}",
                header.format, header.version
            )));
        }
        let body = &bytes[split + 1..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, header describes {}",
                body.len(),
                total * 8
            )));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.iter().product();
            tensors.push((e.name.as_str(), Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())?));
        }

        let n_params = if header.optimizer.is_some() {
            if tensors.len() % 3 != 0 {
                return Err(Error::Checkpoint("optimizer entries do not pair with parameters".into()));
            }
            tensors.len() / 3
        } else {
            tensors.len()
        };
        let mut tensors = tensors.into_iter();
        let mut params = ParamStore::new();
        for (name, t) in tensors.by_ref().take(n_params) {
            let frozen_rows = if name == EMBEDDING { vec![PAD_ID] } else { Vec::new() };
            let trainable = !header.frozen.iter().any(|f| f == name);
            params
                .insert_with(name, t, trainable, frozen_rows)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut moment = |prefix: &str| -> Result<Vec<Tensor>> {
                    let mut out = Vec::with_capacity(n_params);
                    for (p, (name, t)) in params.iter().zip(tensors.by_ref().take(n_params)) {
                        if name != format!("{prefix}{}", p.name()) {
                            return Err(Error::Checkpoint(format!("unexpected entry `{name}`")));
                        }
                        out.push(t);
                    }
                    Ok(out)
                };
                let m = moment("adam.m.")?;
                let v = moment("adam.v.")?;
                Some(AdamState::from_parts(&params, o.hyper, o.step, m, v)?)
            }
            None => None,
        };
        let model = LgnModel::from_parts(header.config, header.vocab, params)?;
        Ok(Checkpoint {
            model,
            optimizer,
            epochs_completed: header.epochs_completed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
