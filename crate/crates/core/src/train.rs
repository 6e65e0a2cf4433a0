//! Language-model training loop, mini-batch sampling and loss curves.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factorcell::{
    backward_into, forward, Context, ContextVector, FactorCellError, FactorCellParams, ModelConfig,
};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState, OptimError};
use crate::params::ParamSet;
use crate::tensor::{seeded_rng, Rng, RngState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] FactorCellError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite training loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// `(iteration, mean per-character NLL)` samples with strictly increasing
/// iterations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<(u64, f64)>,
}

impl LossCurve {
    /// Appends a sample. Samples that do not advance the iteration are
    /// ignored.
    pub fn push(&mut self, iteration: u64, loss: f64) {
        if self.points.last().is_none_or(|&(it, _)| iteration > it) {
            self.points.push((iteration, loss));
        }
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,nll\n");
        for (it, nll) in &self.points {
            writeln!(out, "{it},{nll}").expect("writing to a String");
        }
        out
    }
}

/// Losses accumulated since the last curve sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWindow {
    pub sum: f64,
    pub count: u64,
}

impl LossWindow {
    pub fn add(&mut self, loss: f64) {
        self.sum += loss;
        self.count += 1;
    }

    /// Mean of the window, which is then cleared.
    pub fn take_mean(&mut self) -> f64 {
        let mean = self.sum / self.count.max(1) as f64;
        *self = Self::default();
        mean
    }
}

/// Deterministic shuffled mini-batches. Each epoch's permutation comes from
/// its own ChaCha stream keyed by the seed, so the batch at any iteration is
/// a pure function of `(seed, iteration)`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.max(1),
            seed,
            cached: None,
        }
    }

    pub fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = Rng::seed_from_u64(seed);
        rng.set_stream(epoch + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Example indices for `iteration`. Batches never straddle epochs; the
    /// final batch of an epoch may be short.
    pub fn batch(&mut self, iteration: u64) -> Vec<usize> {
        let per_epoch = self.n.div_ceil(self.batch_size) as u64;
        let epoch = iteration / per_epoch;
        let slot = (iteration % per_epoch) as usize;
        if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.cached = Some((epoch, Self::permutation(self.n, self.seed, epoch)));
        }
        let perm = &self.cached.as_ref().expect("filled above").1;
        let start = slot * self.batch_size;
        perm[start..(start + self.batch_size).min(self.n)].to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
}

/// What the recurrent cell is conditioned on during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Projected image features.
    Image,
    /// A fresh `N(0, I)` context vector per example.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    pub seed: u64,
    pub context_mode: ContextMode,
}

impl TrainConfig {
    /// Adam at 5e-4, batch 32, 80K iterations.
    pub fn full(seed: u64) -> Self {
        Self {
            preset: Preset::Full,
            lr: 5e-4,
            batch_size: 32,
            iterations: 80_000,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            log_every: 500,
            seed,
            context_mode: ContextMode::Image,
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self {
            preset: Preset::Desk,
            lr: 5e-3,
            batch_size: 32,
            iterations: 3000,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            log_every: 100,
            seed,
            context_mode: ContextMode::Image,
        }
    }

    pub fn model_config(&self, vocab_size: usize, feature_dim: usize) -> ModelConfig {
        match self.preset {
            Preset::Full => ModelConfig::full(vocab_size, feature_dim),
            Preset::Desk => ModelConfig::desk(vocab_size, feature_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One `(context, query)` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    /// Query characters followed by `<EOQ>`.
    pub tokens: Vec<usize>,
    pub features: Vec<f32>,
}

/// Resumable LM trainer. Its full state is the params, Adam moments, the
/// iteration counter, the RNG used for noise contexts and the loss curve.
#[derive(Debug, Clone)]
pub struct LmTrainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: FactorCellParams<f32>,
    pub adam: AdamState<FactorCellParams<f32>>,
    pub rng: Rng,
    pub iteration: u64,
    pub curve: LossCurve,
    pub window: LossWindow,
    sampler: BatchSampler,
}

impl LmTrainer {
    pub fn new(model: ModelConfig, config: TrainConfig, n_examples: usize) -> Result<Self> {
        config.validate()?;
        if n_examples == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let mut rng = seeded_rng(config.seed);
        let params = FactorCellParams::init(&model, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            sampler: BatchSampler::new(n_examples, config.batch_size, config.seed),
            model,
            config,
            params,
            adam,
            rng,
            iteration: 0,
            curve: LossCurve::default(),
            window: LossWindow::default(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        model: ModelConfig,
        config: TrainConfig,
        params: FactorCellParams<f32>,
        adam: AdamState<FactorCellParams<f32>>,
        rng_state: &RngState,
        iteration: u64,
        curve: LossCurve,
        n_examples: usize,
    ) -> Result<Self> {
        config.validate()?;
        if n_examples == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let rng = rng_state
            .restore()
            .ok_or_else(|| TrainError::InvalidConfig("malformed rng state".into()))?;
        Ok(Self {
            sampler: BatchSampler::new(n_examples, config.batch_size, config.seed),
            model,
            config,
            params,
            adam,
            rng,
            iteration,
            curve,
            window: LossWindow::default(),
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// One Adam step on the next mini-batch. Returns the batch's mean
    /// per-character NLL.
    pub fn step(&mut self, examples: &[LmExample]) -> Result<f64> {
        let batch = self.sampler.batch(self.iteration);
        let mut passes = Vec::with_capacity(batch.len());
        for &i in &batch {
            let ex = &examples[i];
            let pass = match self.config.context_mode {
                ContextMode::Image => forward(
                    &ex.tokens,
                    &Context::Features(&ex.features),
                    &self.params,
                    self.model.max_len,
                )?,
                ContextMode::Noise => {
                    let c = ContextVector::noise(self.model.context_dim, &mut self.rng);
                    forward(&ex.tokens, &Context::Vector(&c), &self.params, self.model.max_len)?
                }
            };
            passes.push(pass);
        }
        let chars: usize = passes.iter().map(|p| p.len()).sum();
        let nll: f64 = passes.iter().map(|p| p.total_nll()).sum::<f64>() / chars as f64;
        if !nll.is_finite() {
            return Err(TrainError::NonFiniteLoss(self.iteration));
        }
        let weight = 1.0f32 / chars as f32;
        let mut grads = self.params.zeros_like();
        for pass in &passes {
            backward_into(pass, &self.params, weight, &mut grads);
        }
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        adam_step(
            &mut self.params,
            &grads,
            &mut self.adam,
            self.config.lr,
            &self.config.adam,
        )?;
        self.iteration += 1;
        self.window.add(nll);
        if self.iteration.is_multiple_of(self.config.log_every.max(1)) || self.iteration == self.config.iterations {
            let mean = self.window.take_mean();
            log::info!("iteration {} nll {:.4}", self.iteration, mean);
            self.curve.push(self.iteration, mean);
        }
        Ok(nll)
    }

    /// Trains until `iteration` (capped at the configured total).
    pub fn run_until(&mut self, examples: &[LmExample], iteration: u64) -> Result<()> {
        while self.iteration < iteration.min(self.config.iterations) {
            self.step(examples)?;
        }
        Ok(())
    }

    pub fn run(&mut self, examples: &[LmExample]) -> Result<()> {
        self.run_until(examples, self.config.iterations)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }
}

/// Trains a fresh model on `examples`.
pub fn train_lm(
    examples: &[LmExample],
    model: ModelConfig,
    config: TrainConfig,
) -> Result<(FactorCellParams<f32>, LossCurve)> {
    for ex in examples {
        if ex.tokens.len().saturating_sub(1) > model.max_len {
            return Err(FactorCellError::Overlength {
                len: ex.tokens.len() - 1,
                max_len: model.max_len,
            }
            .into());
        }
    }
    let mut trainer = LmTrainer::new(model, config, examples.len())?;
    trainer.run(examples)?;
    Ok((trainer.params, trainer.curve))
}

/// Mean per-character NLL of `examples` under fixed params.
pub fn mean_char_nll(examples: &[LmExample], params: &FactorCellParams<f32>, max_len: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut total, mut chars) = (0.0, 0usize);
    for ex in examples {
        let pass = forward(&ex.tokens, &Context::Features(&ex.features), params, max_len)?;
        total += pass.total_nll();
        chars += pass.len();
    }
    Ok(total / chars as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Vocab, EOQ};
    use proptest::prelude::*;

    fn tiny_examples() -> (Vocab, Vec<LmExample>) {
        let vocab = Vocab::from_corpus(["abc"]);
        let ex = ["ab", "ba", "cab", "a"]
            .iter()
            .enumerate()
            .map(|(i, q)| LmExample {
                tokens: vocab.encode_query(q),
                features: vec![i as f32 * 0.5, 1.0 - i as f32 * 0.25],
            })
            .collect();
        (vocab, ex)
    }

    fn tiny_model(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden_dim: 8,
            rank: 2,
            context_dim: 3,
            feature_dim: 2,
            vocab_size: vocab.len(),
            max_len: 6,
        }
    }

    fn tiny_config(seed: u64, iterations: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            iterations,
            log_every: 5,
            lr: 1e-2,
            ..TrainConfig::desk(seed)
        }
    }

    #[test]
    fn curve_csv_has_header_and_rows() {
        let mut c = LossCurve::default();
        c.push(10, 2.5);
        c.push(10, 9.0);
        c.push(20, 1.25);
        assert_eq!(c.to_csv(), "iteration,nll\n10,2.5\n20,1.25\n");
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3, 7);
        let mut seen: Vec<usize> = (0..4).flat_map(|it| s.batch(it)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.batch(3).len(), 1);
        let mut fresh = BatchSampler::new(10, 3, 7);
        assert_eq!(fresh.batch(5), s.batch(5));
    }

    #[test]
    fn same_seed_same_curve_and_params() {
        let (vocab, ex) = tiny_examples();
        let a = train_lm(&ex, tiny_model(&vocab), tiny_config(3, 20)).unwrap();
        let b = train_lm(&ex, tiny_model(&vocab), tiny_config(3, 20)).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
        let c = train_lm(&ex, tiny_model(&vocab), tiny_config(4, 20)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn split_run_matches_uninterrupted() {
        let (vocab, ex) = tiny_examples();
        let mut cfg = tiny_config(9, 30);
        cfg.context_mode = ContextMode::Noise;
        let mut full = LmTrainer::new(tiny_model(&vocab), cfg.clone(), ex.len()).unwrap();
        full.run(&ex).unwrap();

        let mut first = LmTrainer::new(tiny_model(&vocab), cfg.clone(), ex.len()).unwrap();
        first.run_until(&ex, 15).unwrap();
        let mut second = LmTrainer::resume(
            tiny_model(&vocab),
            cfg,
            first.params.clone(),
            first.adam.clone(),
            &first.rng_state(),
            first.iteration,
            first.curve.clone(),
            ex.len(),
        )
        .unwrap();
        second.run(&ex).unwrap();
        assert_eq!(second.params, full.params);
        assert_eq!(second.curve, full.curve);
    }

    #[test]
    fn memorizes_single_example() {
        let vocab = Vocab::from_corpus(["cat"]);
        let ex = vec![LmExample {
            tokens: vocab.encode_query("cat"),
            features: vec![1.0, 0.0],
        }];
        let mut cfg = tiny_config(1, 300);
        cfg.batch_size = 1;
        cfg.lr = 2e-2;
        let (params, _) = train_lm(&ex, tiny_model(&vocab), cfg).unwrap();
        let nll = mean_char_nll(&ex, &params, 6).unwrap();
        assert!(nll < 0.05, "nll {nll}");
    }

    #[test]
    fn rejects_empty_and_overlength() {
        let (vocab, _) = tiny_examples();
        assert_eq!(
            train_lm(&[], tiny_model(&vocab), tiny_config(1, 1)).unwrap_err(),
            TrainError::EmptyDataset
        );
        let long = vec![LmExample {
            tokens: [vec![3; 7], vec![EOQ]].concat(),
            features: vec![0.0, 0.0],
        }];
        assert!(matches!(
            train_lm(&long, tiny_model(&vocab), tiny_config(1, 1)),
            Err(TrainError::Model(FactorCellError::Overlength { len: 7, max_len: 6 }))
        ));
    }

    #[test]
    fn full_preset_values() {
        let p = TrainConfig::full(0);
        assert_eq!((p.lr, p.batch_size, p.iterations), (5e-4, 32, 80_000));
        let d = TrainConfig::desk(0);
        assert!(d.iterations <= 20_000);
        let m = d.model_config(30, 40);
        assert_eq!((m.embed_dim, m.hidden_dim, m.rank, m.context_dim), (16, 64, 8, 16));
    }

    proptest! {
        #[test]
        fn curve_iterations_strictly_increase(its in proptest::collection::vec(0u64..50, 0..30)) {
            let mut c = LossCurve::default();
            for it in its {
                c.push(it, 1.0);
            }
            prop_assert!(c.points.windows(2).all(|w| w[0].0 < w[1].0));
        }

        #[test]
        fn sampler_batches_are_in_range(n in 1usize..40, bs in 1usize..10, seed in any::<u64>(), it in 0u64..100) {
            let mut s = BatchSampler::new(n, bs, seed);
            let b = s.batch(it);
            prop_assert!(!b.is_empty() && b.len() <= bs);
            prop_assert!(b.iter().all(|&i| i < n));
        }
    }
}
