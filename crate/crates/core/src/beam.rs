//! Beam-search completion of a character prefix.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factorcell::{CellState, Context, Decoder, FactorCellError, FactorCellParams};
use crate::tensor::Real;
use crate::vocab::{Vocab, VocabError, EOQ};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeamError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] FactorCellError),
    #[error("prefix has {len} characters; it must be shorter than max_len {max_len}")]
    PrefixTooLong { len: usize, max_len: usize },
    #[error("query of {len} characters exceeds max_len {max_len}")]
    QueryTooLong { len: usize, max_len: usize },
    #[error("query {query:?} does not start with prefix {prefix:?}")]
    NotAnExtension { query: String, prefix: String },
    #[error("invalid beam parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = BeamError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamParams {
    pub width: usize,
    pub k: usize,
    /// Maximum query length in characters, end-of-query excluded.
    pub max_len: usize,
    /// Rank by mean log-probability per emitted token instead of the total.
    #[serde(default)]
    pub length_normalize: bool,
}

impl BeamParams {
    pub const DEFAULT_WIDTH: usize = 10;
    pub const DEFAULT_K: usize = 10;

    pub fn new(width: usize, k: usize, max_len: usize) -> Self {
        Self {
            width,
            k,
            max_len,
            length_normalize: false,
        }
    }

    pub fn with_max_len(max_len: usize) -> Self {
        Self::new(Self::DEFAULT_WIDTH, Self::DEFAULT_K, max_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.width < self.k {
            return Err(BeamError::InvalidParams(format!(
                "need width >= k >= 1, got width {} and k {}",
                self.width, self.k
            )));
        }
        if self.max_len == 0 {
            return Err(BeamError::InvalidParams("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Prefix plus generated suffix, end-of-query stripped.
    pub text: String,
    /// Total log-probability of the suffix and its end-of-query token.
    pub logprob: f64,
    /// 1-based.
    pub rank: usize,
}

struct Hypothesis<T> {
    suffix: Vec<usize>,
    state: CellState<T>,
    next: Vec<T>,
    score: f64,
}

struct Candidate {
    parent: usize,
    token: usize,
    seq: Vec<usize>,
    score: f64,
    key: f64,
}

/// Higher key first, then lexicographically smaller token sequence.
fn rank_order(a_key: f64, a_seq: &[usize], b_key: f64, b_seq: &[usize]) -> Ordering {
    b_key.total_cmp(&a_key).then_with(|| a_seq.cmp(b_seq))
}

fn sort_key(score: f64, emitted: usize, normalize: bool) -> f64 {
    if normalize {
        score / emitted as f64
    } else {
        score
    }
}

fn feed_prefix<'a, T: Real>(
    prefix_ids: &[usize],
    ctx: &Context<'_, T>,
    params: &'a FactorCellParams<T>,
) -> Result<(Decoder<'a, T>, CellState<T>, Vec<T>)> {
    let dec = Decoder::new(params, ctx)?;
    let (mut state, mut next) = dec.start()?;
    for &t in prefix_ids {
        (state, next) = dec.advance(&state, t)?;
    }
    Ok((dec, state, next))
}

/// Top-`k` completions of `prefix` under context `ctx`.
///
/// Length-synchronous: each round expands every live hypothesis by each
/// character and by end-of-query, keeps the best `width` candidates, and
/// moves the end-of-query ones to the finished pool. A hypothesis at
/// `max_len` characters can only be closed.
pub fn complete<T: Real>(
    prefix: &str,
    ctx: &Context<'_, T>,
    params: &FactorCellParams<T>,
    vocab: &Vocab,
    beam: &BeamParams,
) -> Result<Vec<Completion>> {
    beam.validate()?;
    let prefix_ids = vocab.encode(prefix)?;
    if prefix_ids.len() >= beam.max_len {
        return Err(BeamError::PrefixTooLong {
            len: prefix_ids.len(),
            max_len: beam.max_len,
        });
    }
    let gen_ids = vocab.generation_ids();
    let (dec, state, next) = feed_prefix(&prefix_ids, ctx, params)?;

    let mut active = vec![Hypothesis {
        suffix: Vec::new(),
        state,
        next,
        score: 0.0,
    }];
    let mut finished: Vec<(Vec<usize>, f64, f64)> = Vec::new();

    while !active.is_empty() {
        let mut cands = Vec::with_capacity(active.len() * gen_ids.len());
        for (parent, h) in active.iter().enumerate() {
            let at_limit = prefix_ids.len() + h.suffix.len() >= beam.max_len;
            for &token in &gen_ids {
                if at_limit && token != EOQ {
                    continue;
                }
                let score = h.score + h.next[token].as_f64();
                if !score.is_finite() {
                    continue;
                }
                let mut seq = h.suffix.clone();
                seq.push(token);
                let key = sort_key(score, seq.len(), beam.length_normalize);
                cands.push(Candidate {
                    parent,
                    token,
                    seq,
                    score,
                    key,
                });
            }
        }
        cands.sort_by(|a, b| rank_order(a.key, &a.seq, b.key, &b.seq));
        cands.truncate(beam.width);

        let mut next_active = Vec::with_capacity(cands.len());
        for c in cands {
            if c.token == EOQ {
                finished.push((c.seq, c.score, c.key));
                continue;
            }
            let (state, next) = dec.advance(&active[c.parent].state, c.token)?;
            next_active.push(Hypothesis {
                suffix: c.seq,
                state,
                next,
                score: c.score,
            });
        }
        active = next_active;

        // Extensions only lower the total, so once k finished hypotheses
        // beat every live one the result is fixed.
        if !beam.length_normalize && finished.len() >= beam.k {
            finished.sort_by(|a, b| rank_order(a.2, &a.0, b.2, &b.0));
            let kth = finished[beam.k - 1].1;
            if active.iter().all(|h| h.score < kth) {
                break;
            }
        }
    }

    finished.sort_by(|a, b| rank_order(a.2, &a.0, b.2, &b.0));
    finished.truncate(beam.k);
    Ok(finished
        .into_iter()
        .enumerate()
        .map(|(i, (seq, score, _))| Completion {
            text: format!("{prefix}{}", vocab.decode(&seq)),
            logprob: score,
            rank: i + 1,
        })
        .collect())
}

/// Teacher-forced log-probability of `query`'s suffix after `prefix`,
/// end-of-query included. Accumulates exactly as [`complete`] does, so a
/// returned completion scores to the same value bit for bit.
pub fn score_query<T: Real>(
    query: &str,
    prefix: &str,
    ctx: &Context<'_, T>,
    params: &FactorCellParams<T>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<f64> {
    let Some(suffix) = query.strip_prefix(prefix) else {
        return Err(BeamError::NotAnExtension {
            query: query.to_string(),
            prefix: prefix.to_string(),
        });
    };
    let len = query.chars().count();
    if len > max_len {
        return Err(BeamError::QueryTooLong { len, max_len });
    }
    let prefix_ids = vocab.encode(prefix)?;
    let mut suffix_ids = vocab.encode(suffix)?;
    suffix_ids.push(EOQ);
    let (dec, mut state, mut next) = feed_prefix(&prefix_ids, ctx, params)?;
    let mut score = 0.0f64;
    for (i, &t) in suffix_ids.iter().enumerate() {
        score += next[t].as_f64();
        if i + 1 < suffix_ids.len() {
            (state, next) = dec.advance(&state, t)?;
        }
    }
    Ok(score)
}
