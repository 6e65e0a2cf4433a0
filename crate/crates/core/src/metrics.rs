//! Perplexity, mean reciprocal rank, F1 and the combined evaluation report.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beam::{BeamError, BeamParams, Completion};
use crate::data::QueryRecord;
use crate::factorcell::{forward, Context, ContextVector, FactorCellError, FactorCellParams};
use crate::instance::{ClassCatalog, InstanceError, LabelVector};
use crate::model::{ContextSource, InstanceModel, LanguageModel};
use crate::tensor::{cast_slice, seeded_rng, Real};
use crate::train::{ContextMode, LmExample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prefix fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error(transparent)]
    Model(#[from] FactorCellError),
    #[error(transparent)]
    Beam(#[from] BeamError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Pooled per-character perplexity, `exp(Σ NLL / Σ chars)`, end-of-query
/// included. In noise mode query `i` gets the `i`-th standard-normal context
/// drawn from `seeded_rng(noise_seed)`.
pub fn perplexity<T: Real>(
    params: &FactorCellParams<T>,
    examples: &[LmExample],
    mode: ContextMode,
    noise_seed: u64,
    max_len: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut rng = seeded_rng(noise_seed);
    let (mut nll, mut chars) = (0.0f64, 0usize);
    for ex in examples {
        let pass = match mode {
            ContextMode::Image => {
                let f: Vec<T> = cast_slice(&ex.features);
                forward(&ex.tokens, &Context::Features(&f), params, max_len)?
            }
            ContextMode::Noise => {
                let c = ContextVector::noise(params.context_dim(), &mut rng);
                forward(&ex.tokens, &Context::Vector(&c), params, max_len)?
            }
        };
        nll += pass.total_nll();
        chars += pass.len();
    }
    Ok((nll / chars as f64).exp())
}

/// Characters revealed for a fraction of a query: `floor(f · len)`, at
/// least 1.
pub fn prefix_len(query_len: usize, fraction: f64) -> usize {
    ((fraction * query_len as f64).floor() as usize).max(1)
}

/// Byte-slice of the first `n` characters.
pub fn char_prefix(text: &str, n: usize) -> &str {
    match text.char_indices().nth(n) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// 1-based rank of an exact match of `truth`, if present.
pub fn rank_of(completions: &[Completion], truth: &str) -> Option<usize> {
    completions.iter().position(|c| c.text == truth).map(|i| i + 1)
}

/// Mean of `1/t`, with 0 for misses.
pub fn mrr_from_ranks(ranks: &[Option<usize>]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let sum: f64 = ranks.iter().map(|r| r.map_or(0.0, |t| 1.0 / t as f64)).sum();
    Ok(sum / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrrResult {
    pub mrr: f64,
    pub queries: usize,
}

/// MRR of the true query among the top-`k` beam completions (width `k`) of
/// its `fraction` prefix. Queries shorter than two characters are skipped;
/// queries the vocabulary cannot spell score 0.
pub fn mrr(
    lm: &LanguageModel,
    records: &[QueryRecord],
    fraction: f64,
    mode: ContextMode,
    k: usize,
    noise_seed: u64,
) -> Result<MrrResult> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MetricsError::BadFraction(fraction));
    }
    let beam = BeamParams::new(k, k, lm.config.max_len);
    let mut ranks = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let len = rec.query.chars().count();
        if len < 2 {
            continue;
        }
        if lm.vocab.encode(&rec.query).is_err() || len > lm.config.max_len {
            ranks.push(None);
            continue;
        }
        let prefix = char_prefix(&rec.query, prefix_len(len, fraction));
        let source = match mode {
            ContextMode::Image => ContextSource::Features(rec.features.clone()),
            ContextMode::Noise => ContextSource::Noise {
                seed: noise_seed.wrapping_add(i as u64),
            },
        };
        let completions = lm.complete(prefix, &source, &beam)?;
        ranks.push(rank_of(&completions, &rec.query));
    }
    Ok(MrrResult {
        mrr: mrr_from_ranks(&ranks)?,
        queries: ranks.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Micro,
    Macro,
}

pub fn threshold(probs: &[f64], t: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= t).collect()
}

fn harmonic(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 over thresholded predictions. Under macro averaging a class with no
/// positives in `truth` contributes 0.
pub fn f1(predictions: &[Vec<bool>], truth: &[LabelVector], averaging: Averaging) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(MetricsError::DimensionMismatch {
            expected: truth.len(),
            got: predictions.len(),
        });
    }
    let Some(first) = truth.first() else {
        return Err(MetricsError::EmptyDataset);
    };
    let classes = first.len();
    let mut counts = vec![(0usize, 0usize, 0usize); classes];
    for (p, y) in predictions.iter().zip(truth) {
        for len in [p.len(), y.len()] {
            if len != classes {
                return Err(MetricsError::DimensionMismatch {
                    expected: classes,
                    got: len,
                });
            }
        }
        for (k, (&pk, &yk)) in p.iter().zip(&y.0).enumerate() {
            match (pk, yk) {
                (true, true) => counts[k].0 += 1,
                (true, false) => counts[k].1 += 1,
                (false, true) => counts[k].2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            harmonic(tp, fp, fn_)
        }
        Averaging::Macro => {
            let sum: f64 = counts
                .iter()
                .map(|&(tp, fp, fn_)| if tp + fn_ == 0 { 0.0 } else { harmonic(tp, fp, fn_) })
                .sum();
            sum / classes as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fractions: Vec<f64>,
    pub k: usize,
    pub threshold: f64,
    pub noise_seed: u64,
    /// Evaluate MRR on at most this many queries (the first ones).
    pub mrr_limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.2, 0.4, 0.6, 0.8],
            k: 10,
            threshold: 0.5,
            noise_seed: 0,
            mrr_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrrPair {
    pub image: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub perplexity_queries: usize,
    pub perplexity_chars: usize,
    pub mrr_queries: usize,
    pub f1_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity_image: f64,
    pub perplexity_noise: f64,
    /// Keyed by the fraction printed with one decimal, e.g. `"0.2"`.
    pub mrr_by_prefix_fraction: BTreeMap<String, MrrPair>,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub threshold: f64,
    pub counts: EvalCounts,
}

pub fn fraction_key(f: f64) -> String {
    format!("{f:.1}")
}

pub fn run_eval(
    lm: &LanguageModel,
    head: &InstanceModel,
    records: &[QueryRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let examples = crate::data::lm_examples(records, &lm.vocab);
    let max_len = lm.config.max_len;
    let perplexity_image = perplexity(&lm.params, &examples, ContextMode::Image, cfg.noise_seed, max_len)?;
    let perplexity_noise = perplexity(&lm.params, &examples, ContextMode::Noise, cfg.noise_seed, max_len)?;
    let chars = examples.iter().map(|e| e.tokens.len()).sum();

    let mrr_set = &records[..cfg.mrr_limit.unwrap_or(records.len()).min(records.len())];
    let mut by_fraction = BTreeMap::new();
    let mut mrr_queries = 0;
    for &f in &cfg.fractions {
        let image = mrr(lm, mrr_set, f, ContextMode::Image, cfg.k, cfg.noise_seed)?;
        let noise = mrr(lm, mrr_set, f, ContextMode::Noise, cfg.k, cfg.noise_seed)?;
        mrr_queries = image.queries;
        by_fraction.insert(
            fraction_key(f),
            MrrPair {
                image: image.mrr,
                noise: noise.mrr,
            },
        );
    }

    let (f1_micro, f1_macro) = instance_f1(head, records, cfg.threshold)?;
    Ok(EvalReport {
        perplexity_image,
        perplexity_noise,
        mrr_by_prefix_fraction: by_fraction,
        f1_micro,
        f1_macro,
        threshold: cfg.threshold,
        counts: EvalCounts {
            perplexity_queries: examples.len(),
            perplexity_chars: chars,
            mrr_queries,
            f1_queries: records.len(),
        },
    })
}

/// Micro and macro F1 of the instance head on `records`.
pub fn instance_f1(head: &InstanceModel, records: &[QueryRecord], t: f64) -> Result<(f64, f64)> {
    let (preds, truth) = instance_predictions(head, &head.catalog, records, t)?;
    Ok((
        f1(&preds, &truth, Averaging::Micro)?,
        f1(&preds, &truth, Averaging::Macro)?,
    ))
}

fn instance_predictions(
    head: &InstanceModel,
    catalog: &ClassCatalog,
    records: &[QueryRecord],
    t: f64,
) -> Result<(Vec<Vec<bool>>, Vec<LabelVector>)> {
    let mut preds = Vec::with_capacity(records.len());
    let mut truth = Vec::with_capacity(records.len());
    for r in records {
        preds.push(threshold(&head.probs(&r.query)?, t));
        truth.push(catalog.label_vector(&r.instances)?);
    }
    Ok((preds, truth))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>10} {:>10}", "metric", "image", "noise")?;
        writeln!(
            f,
            "{:<28} {:>10.4} {:>10.4}",
            "perplexity", self.perplexity_image, self.perplexity_noise
        )?;
        for (frac, m) in &self.mrr_by_prefix_fraction {
            writeln!(
                f,
                "{:<28} {:>10.4} {:>10.4}",
                format!("mrr@prefix {frac}"),
                m.image,
                m.noise
            )?;
        }
        writeln!(
            f,
            "{:<28} {:>10.4}",
            format!("f1 micro (t={})", self.threshold),
            self.f1_micro
        )?;
        writeln!(
            f,
            "{:<28} {:>10.4}",
            format!("f1 macro (t={})", self.threshold),
            self.f1_macro
        )?;
        write!(
            f,
            "queries: perplexity {} ({} chars), mrr {}, f1 {}",
            self.counts.perplexity_queries,
            self.counts.perplexity_chars,
            self.counts.mrr_queries,
            self.counts.f1_queries
        )
    }
}
