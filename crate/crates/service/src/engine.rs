use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use ctxcomplete_core::beam::{BeamError, BeamParams};
use ctxcomplete_core::checkpoint::{CheckpointError, InstanceCheckpoint, LmCheckpoint};
use ctxcomplete_core::data::ImageRecord;
use ctxcomplete_core::instance::InstanceError;
use ctxcomplete_core::model::{ContextSource, InstanceModel, LanguageModel};
use ctxcomplete_core::params::ParamSet;
use ctxcomplete_core::vocab::VocabError;

use crate::api::{ApiError, CompleteRequest, CompleteResponse, Health, ImageInfo, InstancesRequest, InstancesResponse};

/// Pseudo image id selecting a standard-normal context.
pub const NOISE_ID: &str = "noise";
pub const DEFAULT_WIDTH: usize = 10;
pub const DEFAULT_K: usize = 10;
pub const MAX_WIDTH: usize = 512;
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("gallery image {id:?} has {found} features, the model expects {expected}")]
    FeatureDim { id: String, expected: usize, found: usize },
    #[error("gallery image id {0:?} is duplicated or reserved")]
    BadImageId(String),
}

/// One immutable model snapshot.
#[derive(Debug)]
pub struct Engine {
    lm: LanguageModel,
    gallery: Vec<ImageRecord>,
    index: HashMap<String, usize>,
    instances: Option<InstanceModel>,
    model_version: String,
}

impl Engine {
    pub fn new(
        lm: LanguageModel,
        gallery: Vec<ImageRecord>,
        instances: Option<InstanceModel>,
    ) -> Result<Self, EngineError> {
        let mut index = HashMap::with_capacity(gallery.len());
        for (i, img) in gallery.iter().enumerate() {
            if img.features.len() != lm.config.feature_dim {
                return Err(EngineError::FeatureDim {
                    id: img.id.clone(),
                    expected: lm.config.feature_dim,
                    found: img.features.len(),
                });
            }
            if img.id == NOISE_ID || index.insert(img.id.clone(), i).is_some() {
                return Err(EngineError::BadImageId(img.id.clone()));
            }
        }
        let mut hash = Fnv::default();
        hash.params(&lm.params);
        if let Some(m) = &instances {
            hash.params(&m.params);
        }
        Ok(Self {
            lm,
            gallery,
            index,
            instances,
            model_version: format!("{:016x}", hash.0),
        })
    }

    pub fn from_checkpoints(lm: &LmCheckpoint, instances: Option<&InstanceCheckpoint>) -> Result<Self, EngineError> {
        Self::new(
            lm.language_model(),
            lm.gallery.clone(),
            instances.map(InstanceCheckpoint::instance_model),
        )
    }

    pub fn load(lm_path: &Path, instances_path: Option<&Path>) -> Result<Self, EngineError> {
        let lm = LmCheckpoint::load(lm_path)?;
        let inst = instances_path.map(InstanceCheckpoint::load).transpose()?;
        Self::from_checkpoints(&lm, inst.as_ref())
    }

    /// Hash of the loaded weights.
    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn language_model(&self) -> &LanguageModel {
        &self.lm
    }

    pub fn instance_model(&self) -> Option<&InstanceModel> {
        self.instances.as_ref()
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            model_version: self.model_version.clone(),
        }
    }

    pub fn images(&self) -> Vec<ImageInfo> {
        self.gallery
            .iter()
            .map(|img| ImageInfo {
                id: img.id.clone(),
                instances: img.instances.clone(),
            })
            .collect()
    }

    pub fn context(&self, image_id: &str, seed: Option<u64>) -> Result<ContextSource, ApiError> {
        if image_id == NOISE_ID {
            return Ok(ContextSource::Noise {
                seed: seed.unwrap_or(0),
            });
        }
        self.index
            .get(image_id)
            .map(|&i| ContextSource::Features(self.gallery[i].features.clone()))
            .ok_or_else(|| ApiError::not_found("unknown_image", format!("no image with id {image_id:?}")))
    }

    pub fn beam_params(&self, width: Option<usize>, k: Option<usize>) -> Result<BeamParams, ApiError> {
        let k = k.unwrap_or(DEFAULT_K);
        let width = width.unwrap_or(DEFAULT_WIDTH.max(k));
        if width > MAX_WIDTH {
            return Err(ApiError::bad_request(
                "invalid_beam",
                format!("width {width} exceeds the limit of {MAX_WIDTH}"),
            ));
        }
        let params = BeamParams::new(width, k, self.lm.config.max_len);
        params
            .validate()
            .map_err(|e| ApiError::bad_request("invalid_beam", e.to_string()))?;
        Ok(params)
    }

    pub fn complete(&self, req: &CompleteRequest) -> Result<CompleteResponse, ApiError> {
        let source = self.context(&req.image_id, req.seed)?;
        let beam = self.beam_params(req.width, req.k)?;
        let completions = self.lm.complete(&req.prefix, &source, &beam).map_err(beam_error)?;
        Ok(CompleteResponse { completions })
    }

    pub fn instances(&self, req: &InstancesRequest) -> Result<InstancesResponse, ApiError> {
        let model = self
            .instances
            .as_ref()
            .ok_or_else(|| ApiError::unavailable("no instance model is loaded"))?;
        rank_instances(model, req)
    }
}

/// Answers an instance request from the head alone.
pub fn rank_instances(model: &InstanceModel, req: &InstancesRequest) -> Result<InstancesResponse, ApiError> {
    if req.query.trim().is_empty() {
        return Err(ApiError::bad_request("empty_query", "query must not be empty"));
    }
    let probs = model.ranked(&req.query, req.top).map_err(|e| match e {
        InstanceError::Overlength { .. } => ApiError::bad_request("query_too_long", e.to_string()),
        InstanceError::EmptyQuery => ApiError::bad_request("empty_query", e.to_string()),
        other => ApiError::internal(other.to_string()),
    })?;
    Ok(InstancesResponse {
        probs,
        threshold_used: THRESHOLD,
    })
}

fn beam_error(e: BeamError) -> ApiError {
    match e {
        BeamError::Vocab(VocabError::OutOfVocabulary(c)) => {
            ApiError::bad_request("unknown_char", format!("character {c:?} is not in the vocabulary"))
        }
        BeamError::PrefixTooLong { .. } => ApiError::bad_request("prefix_too_long", e.to_string()),
        BeamError::InvalidParams(_) => ApiError::bad_request("invalid_beam", e.to_string()),
        other => ApiError::internal(other.to_string()),
    }
}

#[derive(Debug)]
struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn params<P: ParamSet<f32>>(&mut self, params: &P) {
        for v in params.views() {
            self.bytes(v.name.as_bytes());
            for x in v.data {
                self.bytes(&x.to_le_bytes());
            }
        }
    }
}

/// The currently served snapshot. Readers clone the `Arc` and never block
/// each other; `replace` swaps the snapshot between requests.
#[derive(Debug, Default)]
pub struct ModelSlot(RwLock<Option<Arc<Engine>>>);

impl ModelSlot {
    pub fn new(engine: Engine) -> Self {
        Self(RwLock::new(Some(Arc::new(engine))))
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self) -> Option<Arc<Engine>> {
        self.0.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn replace(&self, engine: Option<Engine>) -> Option<Arc<Engine>> {
        let mut guard = self.0.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *guard, engine.map(Arc::new))
    }
}
