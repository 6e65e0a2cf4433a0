//! Trained artifacts bundled with their vocabulary and class catalog.

use serde::{Deserialize, Serialize};

use crate::beam::{self, BeamParams, Completion};
use crate::factorcell::{Context, ContextVector, FactorCellParams, ModelConfig};
use crate::instance::{self, ClassCatalog, InstanceConfig, InstanceError, InstanceHeadParams};
use crate::tensor::seeded_rng;
use crate::vocab::Vocab;

/// The completion model: FactorCell weights plus the character vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: FactorCellParams<f32>,
}

/// Context source for inference.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextSource {
    Features(Vec<f32>),
    /// Standard-normal context drawn from a seeded generator.
    Noise {
        seed: u64,
    },
}

impl LanguageModel {
    pub fn context_vector(&self, source: &ContextSource) -> Result<ContextVector<f32>, beam::BeamError> {
        Ok(match source {
            ContextSource::Features(f) => self.params.project(f)?,
            ContextSource::Noise { seed } => ContextVector::noise(self.config.context_dim, &mut seeded_rng(*seed)),
        })
    }

    pub fn complete(
        &self,
        prefix: &str,
        source: &ContextSource,
        beam: &BeamParams,
    ) -> Result<Vec<Completion>, beam::BeamError> {
        let c = self.context_vector(source)?;
        beam::complete(prefix, &Context::Vector(&c), &self.params, &self.vocab, beam)
    }

    pub fn score(&self, query: &str, prefix: &str, source: &ContextSource) -> Result<f64, beam::BeamError> {
        let c = self.context_vector(source)?;
        beam::score_query(
            query,
            prefix,
            &Context::Vector(&c),
            &self.params,
            &self.vocab,
            self.config.max_len,
        )
    }

    pub fn default_beam(&self) -> BeamParams {
        BeamParams::with_max_len(self.config.max_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub class: String,
    pub p: f64,
}

/// The instance head with its vocabulary and class catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceModel {
    pub config: InstanceConfig,
    pub vocab: Vocab,
    pub catalog: ClassCatalog,
    pub params: InstanceHeadParams<f32>,
}

impl InstanceModel {
    /// Per-class probabilities in catalog order. Unknown characters map to
    /// `<UNK>`.
    pub fn probs(&self, query: &str) -> Result<Vec<f64>, InstanceError> {
        let tokens = self.vocab.encode_lossy(query);
        Ok(instance::instance_probs(&tokens, &self.params, self.config.max_len)?
            .into_iter()
            .map(f64::from)
            .collect())
    }

    /// Classes sorted by probability, highest first, ties by catalog order.
    pub fn ranked(&self, query: &str, top: Option<usize>) -> Result<Vec<ClassProbability>, InstanceError> {
        let probs = self.probs(query)?;
        let mut idx: Vec<usize> = (0..probs.len()).collect();
        idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        idx.truncate(top.unwrap_or(probs.len()));
        Ok(idx
            .into_iter()
            .map(|i| ClassProbability {
                class: self.catalog.name(i).to_string(),
                p: probs[i],
            })
            .collect())
    }
}
