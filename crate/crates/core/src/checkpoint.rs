//! Binary checkpoint format.
//!
//! ```text
//! "FCQC" | version: u32 LE | header_len: u64 LE | header: JSON (header_len bytes) | payload
//! ```
//!
//! The JSON header is `{"kind", "meta", "tensors": [{"name", "shape", "offset"}]}`.
//! `offset` is a byte offset into the payload, which holds each tensor as
//! contiguous little-endian `f32` values in row-major order.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageRecord;
use crate::factorcell::{FactorCellParams, ModelConfig};
use crate::instance::{ClassCatalog, InstanceConfig, InstanceHeadParams, InstanceTrainConfig, InstanceTrainer};
use crate::model::{InstanceModel, LanguageModel};
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::tensor::RngState;
use crate::train::{LmTrainer, LossCurve, LossWindow, TrainConfig};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"FCQC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("truncated payload: manifest needs {needed} bytes, file has {available}")]
    TruncatedPayload { needed: u64, available: u64 },
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    WrongKind { expected: String, found: String },
    #[error("tensor {0:?} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Untyped checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let manifest = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: manifest,
        })
        .expect("header serializes");

        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::CorruptHeader("file ends inside the preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| CheckpointError::CorruptHeader(format!("header length {header_len} exceeds file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut spans = Vec::with_capacity(header.tensors.len());
        let mut seen = std::collections::HashSet::new();
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(CheckpointError::CorruptManifest(format!(
                    "duplicate tensor {:?}",
                    e.name
                )));
            }
            if e.offset % 4 != 0 {
                return Err(CheckpointError::CorruptManifest(format!(
                    "tensor {:?} offset {} is not 4-byte aligned",
                    e.name, e.offset
                )));
            }
            let len = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::CorruptManifest(format!("tensor {:?} is too large", e.name)))?;
            let end = e
                .offset
                .checked_add(len)
                .ok_or_else(|| CheckpointError::CorruptManifest(format!("tensor {:?} is too large", e.name)))?;
            spans.push((e.offset, end, e.name.as_str()));
        }
        let mut sorted = spans.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CheckpointError::CorruptManifest(format!(
                    "tensors {:?} and {:?} overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        let needed = sorted.last().map_or(0, |s| s.1);
        if needed > payload.len() as u64 {
            return Err(CheckpointError::TruncatedPayload {
                needed,
                available: payload.len() as u64,
            });
        }

        let tensors = header
            .tensors
            .iter()
            .zip(&spans)
            .map(|(e, &(start, end, _))| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: payload[start as usize..end as usize]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            })
            .collect();
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))
    }
}

fn push_params<P: ParamSet<f32>>(out: &mut Vec<NamedTensor>, prefix: &str, p: &P) {
    for v in p.views() {
        out.push(NamedTensor {
            name: format!("{prefix}.{}", v.name),
            shape: v.shape,
            data: v.data.to_vec(),
        });
    }
}

/// Fills `template`'s buffers from tensors named `prefix.<group>`.
fn fill_params<P: ParamSet<f32>>(tensors: &HashMap<&str, &NamedTensor>, prefix: &str, mut template: P) -> Result<P> {
    let shapes: Vec<Vec<usize>> = template.views().into_iter().map(|v| v.shape).collect();
    for ((group, buf), shape) in template.views_mut().into_iter().zip(shapes) {
        let name = format!("{prefix}.{group}");
        let t = tensors
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if t.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: shape,
                found: t.shape.clone(),
            });
        }
        buf.copy_from_slice(&t.data);
    }
    Ok(template)
}

fn push_adam<P: ParamSet<f32>>(out: &mut Vec<NamedTensor>, adam: &AdamState<P>) {
    push_params(out, "adam.m", &adam.m);
    push_params(out, "adam.v", &adam.v);
}

fn fill_adam<P: ParamSet<f32>>(tensors: &HashMap<&str, &NamedTensor>, step: u64, template: &P) -> Result<AdamState<P>> {
    Ok(AdamState {
        step,
        m: fill_params(tensors, "adam.m", template.zeros_like())?,
        v: fill_params(tensors, "adam.v", template.zeros_like())?,
    })
}

fn index(raw: &RawCheckpoint) -> HashMap<&str, &NamedTensor> {
    raw.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
}

fn vocab_from(symbols: &[String]) -> Result<Vocab> {
    Vocab::from_symbols(symbols).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct GalleryEntry {
    id: String,
    instances: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LmMeta {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
    classes: Vec<String>,
    iteration: u64,
    adam_step: u64,
    rng: RngState,
    curve: LossCurve,
    #[serde(default)]
    window: LossWindow,
    gallery: Vec<GalleryEntry>,
}

/// Everything needed to serve or resume the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct LmCheckpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocab,
    /// Instance classes of the dataset the model was trained on.
    pub classes: Vec<String>,
    pub params: FactorCellParams<f32>,
    pub adam: AdamState<FactorCellParams<f32>>,
    pub rng: RngState,
    pub iteration: u64,
    pub curve: LossCurve,
    pub window: LossWindow,
    /// Demo contexts served by the completion service.
    pub gallery: Vec<ImageRecord>,
}

pub const LM_KIND: &str = "factorcell-lm";
pub const INSTANCE_KIND: &str = "instance-head";

impl LmCheckpoint {
    pub fn from_trainer(trainer: &LmTrainer, vocab: Vocab, classes: Vec<String>, gallery: Vec<ImageRecord>) -> Self {
        Self {
            model: trainer.model.clone(),
            train: trainer.config.clone(),
            vocab,
            classes,
            params: trainer.params.clone(),
            adam: trainer.adam.clone(),
            rng: trainer.rng_state(),
            iteration: trainer.iteration,
            curve: trainer.curve.clone(),
            window: trainer.window,
            gallery,
        }
    }

    pub fn into_trainer(self, n_examples: usize) -> Result<LmTrainer, crate::train::TrainError> {
        let window = self.window;
        let mut trainer = LmTrainer::resume(
            self.model,
            self.train,
            self.params,
            self.adam,
            &self.rng,
            self.iteration,
            self.curve,
            n_examples,
        )?;
        trainer.window = window;
        Ok(trainer)
    }

    pub fn language_model(&self) -> LanguageModel {
        LanguageModel {
            config: self.model.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_raw(&self) -> RawCheckpoint {
        let mut tensors = Vec::new();
        push_params(&mut tensors, "params", &self.params);
        push_adam(&mut tensors, &self.adam);
        let feat_dim = self.model.feature_dim;
        tensors.push(NamedTensor {
            name: "gallery.features".into(),
            shape: vec![self.gallery.len(), feat_dim],
            data: self.gallery.iter().flat_map(|g| g.features.iter().copied()).collect(),
        });
        let meta = LmMeta {
            model: self.model.clone(),
            train: self.train.clone(),
            vocab: self.vocab.symbols(),
            classes: self.classes.clone(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            curve: self.curve.clone(),
            window: self.window,
            gallery: self
                .gallery
                .iter()
                .map(|g| GalleryEntry {
                    id: g.id.clone(),
                    instances: g.instances.clone(),
                })
                .collect(),
        };
        RawCheckpoint {
            kind: LM_KIND.into(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors,
        }
    }

    pub fn from_raw(raw: &RawCheckpoint) -> Result<Self> {
        raw.expect_kind(LM_KIND)?;
        let meta: LmMeta = raw.meta()?;
        let tensors = index(raw);
        let template = FactorCellParams::zeros(&meta.model);
        let params = fill_params(&tensors, "params", template.clone())?;
        let adam = fill_adam(&tensors, meta.adam_step, &template)?;

        let feats = tensors
            .get("gallery.features")
            .ok_or_else(|| CheckpointError::MissingTensor("gallery.features".into()))?;
        let expected = vec![meta.gallery.len(), meta.model.feature_dim];
        if feats.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: "gallery.features".into(),
                expected,
                found: feats.shape.clone(),
            });
        }
        let gallery = meta
            .gallery
            .into_iter()
            .enumerate()
            .map(|(i, g)| ImageRecord {
                id: g.id,
                features: feats.data[i * meta.model.feature_dim..(i + 1) * meta.model.feature_dim].to_vec(),
                instances: g.instances,
            })
            .collect();
        Ok(Self {
            vocab: vocab_from(&meta.vocab)?,
            model: meta.model,
            train: meta.train,
            classes: meta.classes,
            params,
            adam,
            rng: meta.rng,
            iteration: meta.iteration,
            curve: meta.curve,
            window: meta.window,
            gallery,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_raw().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(&RawCheckpoint::load(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceMeta {
    config: InstanceConfig,
    train: InstanceTrainConfig,
    vocab: Vec<String>,
    classes: Vec<String>,
    iteration: u64,
    adam_step: u64,
    rng: RngState,
    curve: LossCurve,
    #[serde(default)]
    window: LossWindow,
}

/// Everything needed to serve or resume the instance head.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCheckpoint {
    pub config: InstanceConfig,
    pub train: InstanceTrainConfig,
    pub vocab: Vocab,
    pub catalog: ClassCatalog,
    pub params: InstanceHeadParams<f32>,
    pub adam: AdamState<InstanceHeadParams<f32>>,
    pub rng: RngState,
    pub iteration: u64,
    pub curve: LossCurve,
    pub window: LossWindow,
}

impl InstanceCheckpoint {
    pub fn from_trainer(trainer: &InstanceTrainer, vocab: Vocab, catalog: ClassCatalog) -> Self {
        Self {
            config: trainer.config.clone(),
            train: trainer.train_config.clone(),
            vocab,
            catalog,
            params: trainer.params.clone(),
            adam: trainer.adam.clone(),
            rng: RngState::capture(&trainer.rng),
            iteration: trainer.iteration,
            curve: trainer.curve.clone(),
            window: trainer.window,
        }
    }

    pub fn into_trainer(self, n_examples: usize) -> Result<InstanceTrainer, crate::instance::InstanceError> {
        let window = self.window;
        let mut trainer = InstanceTrainer::resume(
            self.config,
            self.train,
            self.params,
            self.adam,
            &self.rng,
            self.iteration,
            self.curve,
            n_examples,
        )?;
        trainer.window = window;
        Ok(trainer)
    }

    pub fn instance_model(&self) -> InstanceModel {
        InstanceModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            catalog: self.catalog.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_raw(&self) -> RawCheckpoint {
        let mut tensors = Vec::new();
        push_params(&mut tensors, "params", &self.params);
        push_adam(&mut tensors, &self.adam);
        let meta = InstanceMeta {
            config: self.config.clone(),
            train: self.train.clone(),
            vocab: self.vocab.symbols(),
            classes: self.catalog.names().to_vec(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            curve: self.curve.clone(),
            window: self.window,
        };
        RawCheckpoint {
            kind: INSTANCE_KIND.into(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors,
        }
    }

    pub fn from_raw(raw: &RawCheckpoint) -> Result<Self> {
        raw.expect_kind(INSTANCE_KIND)?;
        let meta: InstanceMeta = raw.meta()?;
        let tensors = index(raw);
        let template = InstanceHeadParams::zeros(&meta.config);
        let params = fill_params(&tensors, "params", template.clone())?;
        let adam = fill_adam(&tensors, meta.adam_step, &template)?;
        let catalog = ClassCatalog::new(meta.classes).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        Ok(Self {
            vocab: vocab_from(&meta.vocab)?,
            config: meta.config,
            train: meta.train,
            catalog,
            params,
            adam,
            rng: meta.rng,
            iteration: meta.iteration,
            curve: meta.curve,
            window: meta.window,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_raw().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(&RawCheckpoint::load(path)?)
    }
}
