//! Multilabel instance-probability head.
//!
//! A completed query is encoded by a context-free coupled-gate LSTM, the
//! per-step hidden states are mean-pooled, passed through dropout and a dense
//! layer, and squashed elementwise by a sigmoid. Each class probability is
//! independent; training minimizes the summed sigmoid cross-entropy.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcheck::{check_gradients, GradCheckReport, FD_STEP};
use crate::lstm::{self, StepCache};
use crate::optim::{adam_step, clip_global_norm, warmup_lr, AdamConfig, AdamState, OptimError};
use crate::params::{ParamSet, ParamView};
use crate::tensor::{
    add_outer, cast_slice, mat_vec, sigmoid, standard_normal_vec, uniform_fill, xavier_bound, Mat, Real, Rng, RngState,
    TensorError,
};
use crate::train::{BatchSampler, LossCurve, LossWindow};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstanceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("query is empty")]
    EmptyQuery,
    #[error("query of {len} characters exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },
    #[error("character id {id} out of range for vocabulary of size {vocab_size}")]
    CharOutOfRange { id: usize, vocab_size: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown instance class {0:?}")]
    UnknownClass(String),
    #[error("duplicate instance class {0:?}")]
    DuplicateClass(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid instance config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss encountered")]
    NonFiniteLoss,
}

pub type Result<T, E = InstanceError> = std::result::Result<T, E>;

/// Ordered set of instance class names; positions in probability vectors
/// follow this order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCatalog {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassCatalog {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(InstanceError::DuplicateClass(c.clone()));
            }
        }
        Ok(Self { classes, index })
    }

    /// Sorted unique names from any label source.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: std::collections::BTreeSet<&str> = labels.into_iter().collect();
        Self::new(set.into_iter().map(String::from).collect()).expect("set is unique")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.classes[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn label_vector<S: AsRef<str>>(&self, instances: &[S]) -> Result<LabelVector> {
        let mut y = vec![false; self.len()];
        for name in instances {
            let idx = self
                .index_of(name.as_ref())
                .ok_or_else(|| InstanceError::UnknownClass(name.as_ref().to_string()))?;
            y[idx] = true;
        }
        Ok(LabelVector(y))
    }
}

/// `y_k = 1` iff class `k` is referred to by the query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(pub Vec<bool>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get<T: Real>(&self, k: usize) -> T {
        if self.0[k] {
            T::one()
        } else {
            T::zero()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub max_len: usize,
    /// Dropout probability on the pooled representation, training only.
    pub dropout: f64,
}

impl InstanceConfig {
    pub const DEFAULT_DROPOUT: f64 = 0.10;

    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 48,
            vocab_size,
            num_classes,
            max_len: 50,
            dropout: Self::DEFAULT_DROPOUT,
        }
    }

    pub fn full(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            embed_dim: 24,
            hidden_dim: 512,
            vocab_size,
            num_classes,
            max_len: 50,
            dropout: Self::DEFAULT_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(InstanceError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(InstanceError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceHeadParams<T> {
    /// Encoder character embeddings, `vocab × e`.
    pub embed: Mat<T>,
    /// Encoder recurrent weights, `(e+h) × 3h`.
    pub w: Mat<T>,
    pub b: Vec<T>,
    /// Dense output layer, `h × |O|`.
    pub dense_w: Mat<T>,
    pub dense_b: Vec<T>,
}

impl<T: Real> InstanceHeadParams<T> {
    pub fn zeros(cfg: &InstanceConfig) -> Self {
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        Self {
            embed: Mat::zeros(cfg.vocab_size, e),
            w: Mat::zeros(e + h, 3 * h),
            b: vec![T::zero(); 3 * h],
            dense_w: Mat::zeros(h, cfg.num_classes),
            dense_b: vec![T::zero(); cfg.num_classes],
        }
    }

    pub fn init(cfg: &InstanceConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let mut p = Self::zeros(cfg);
        uniform_fill(p.embed.data_mut(), xavier_bound(cfg.vocab_size, e), rng);
        uniform_fill(p.w.data_mut(), xavier_bound(e + h, 3 * h), rng);
        uniform_fill(p.dense_w.data_mut(), xavier_bound(h, cfg.num_classes), rng);
        Ok(p)
    }

    pub fn hidden_dim(&self) -> usize {
        self.dense_w.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.dense_b.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn cast<U: Real>(&self) -> InstanceHeadParams<U> {
        InstanceHeadParams {
            embed: self.embed.cast(),
            w: self.w.cast(),
            b: cast_slice(&self.b),
            dense_w: self.dense_w.cast(),
            dense_b: cast_slice(&self.dense_b),
        }
    }
}

impl<T: Real> ParamSet<T> for InstanceHeadParams<T> {
    fn views(&self) -> Vec<ParamView<'_, T>> {
        vec![
            ParamView {
                name: "embed",
                shape: self.embed.shape().to_vec(),
                data: self.embed.data(),
            },
            ParamView {
                name: "w",
                shape: self.w.shape().to_vec(),
                data: self.w.data(),
            },
            ParamView {
                name: "b",
                shape: vec![self.b.len()],
                data: &self.b,
            },
            ParamView {
                name: "dense_w",
                shape: self.dense_w.shape().to_vec(),
                data: self.dense_w.data(),
            },
            ParamView {
                name: "dense_b",
                shape: vec![self.dense_b.len()],
                data: &self.dense_b,
            },
        ]
    }

    fn views_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("embed", self.embed.data_mut()),
            ("w", self.w.data_mut()),
            ("b", &mut self.b),
            ("dense_w", self.dense_w.data_mut()),
            ("dense_b", &mut self.dense_b),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted-dropout mask: each unit is zeroed with probability `rate`,
/// survivors are scaled by `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Activations of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadPass<T> {
    inputs: Vec<usize>,
    steps: Vec<StepCache<T>>,
    pub pooled: Vec<T>,
    mask: Option<Vec<T>>,
    dropped: Vec<T>,
    pub logits: Vec<T>,
}

impl<T: Real> HeadPass<T> {
    pub fn probs(&self) -> Vec<T> {
        self.logits.iter().map(|&x| sigmoid(x)).collect()
    }
}

fn check_tokens(tokens: &[usize], vocab_size: usize, max_len: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(InstanceError::EmptyQuery);
    }
    if tokens.len() > max_len {
        return Err(InstanceError::Overlength {
            len: tokens.len(),
            max_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(InstanceError::CharOutOfRange { id, vocab_size });
    }
    Ok(())
}

/// Runs encoder, pooling, optional dropout `mask` and dense layer.
pub fn forward_head<T: Real>(
    tokens: &[usize],
    params: &InstanceHeadParams<T>,
    mask: Option<&[T]>,
    max_len: usize,
) -> Result<HeadPass<T>> {
    check_tokens(tokens, params.vocab_size(), max_len)?;
    let hidden = params.hidden_dim();
    if let Some(m) = mask {
        if m.len() != hidden {
            return Err(InstanceError::LengthMismatch {
                expected: hidden,
                got: m.len(),
            });
        }
    }
    let mut h = vec![T::zero(); hidden];
    let mut cell = vec![T::zero(); hidden];
    let mut pooled = vec![T::zero(); hidden];
    let mut steps = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let mut input = params.embed.row(tok).to_vec();
        input.extend_from_slice(&h);
        let (h_next, cell_next, cache) = lstm::step_forward(input, &cell, &params.w, &params.b);
        for (p, &v) in pooled.iter_mut().zip(&h_next) {
            *p += v;
        }
        h = h_next;
        cell = cell_next;
        steps.push(cache);
    }
    let inv_len = T::one() / T::lit(tokens.len() as f64);
    pooled.iter_mut().for_each(|v| *v *= inv_len);

    let dropped: Vec<T> = match mask {
        Some(m) => pooled.iter().zip(m).map(|(&p, &k)| p * k).collect(),
        None => pooled.clone(),
    };
    let mut logits = params.dense_b.clone();
    for (r, &x) in dropped.iter().enumerate() {
        crate::tensor::axpy(x, params.dense_w.row(r), &mut logits);
    }
    Ok(HeadPass {
        inputs: tokens.to_vec(),
        steps,
        pooled,
        mask: mask.map(<[T]>::to_vec),
        dropped,
        logits,
    })
}

/// Mean-pooled query representation. Dropout is drawn from `rng` only in
/// [`Mode::Train`].
pub fn encode_query<T: Real>(
    tokens: &[usize],
    params: &InstanceHeadParams<T>,
    cfg: &InstanceConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<T>> {
    let mask = match mode {
        Mode::Train => Some(dropout_mask(params.hidden_dim(), cfg.dropout, rng)),
        Mode::Infer => None,
    };
    let pass = forward_head(tokens, params, mask.as_deref(), cfg.max_len)?;
    Ok(pass.dropped)
}

/// Independent per-class probabilities in inference mode.
pub fn instance_probs<T: Real>(tokens: &[usize], params: &InstanceHeadParams<T>, max_len: usize) -> Result<Vec<T>> {
    Ok(forward_head(tokens, params, None, max_len)?.probs())
}

/// Summed sigmoid cross-entropy from logits:
/// `Σ_k max(x,0) - x·y + ln(1 + exp(-|x|))`.
pub fn selection_loss_from_logits<T: Real>(logits: &[T], y: &LabelVector) -> Result<f64> {
    if logits.len() != y.len() {
        return Err(InstanceError::LengthMismatch {
            expected: y.len(),
            got: logits.len(),
        });
    }
    Ok(logits
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let x = x.as_f64();
            let yk: f64 = y.get(k);
            x.max(0.0) - x * yk + (-x.abs()).exp().ln_1p()
        })
        .sum())
}

/// `-Σ_k [y_k ln p_k + (1 - y_k) ln(1 - p_k)]` with `0 · ln 0 = 0`.
pub fn selection_loss(probs: &[f64], y: &LabelVector) -> Result<f64> {
    if probs.len() != y.len() {
        return Err(InstanceError::LengthMismatch {
            expected: y.len(),
            got: probs.len(),
        });
    }
    Ok(probs
        .iter()
        .zip(&y.0)
        .map(|(&p, &yk)| if yk { -p.ln() } else { -(-p).ln_1p() })
        .sum())
}

/// Gradient of [`selection_loss_from_logits`] w.r.t. the logits: `σ(x) - y`.
pub fn logit_gradient<T: Real>(logits: &[T], y: &LabelVector) -> Vec<T> {
    logits
        .iter()
        .enumerate()
        .map(|(k, &x)| sigmoid(x) - y.get::<T>(k))
        .collect()
}

/// Accumulates `weight · ∂loss/∂θ` for one pass into `grads`.
pub fn backward_head<T: Real>(
    pass: &HeadPass<T>,
    y: &LabelVector,
    params: &InstanceHeadParams<T>,
    weight: T,
    grads: &mut InstanceHeadParams<T>,
) {
    let hidden = params.hidden_dim();
    let e = params.embed.cols();
    let dlogits: Vec<T> = logit_gradient(&pass.logits, y)
        .into_iter()
        .map(|g| g * weight)
        .collect();
    add_outer(&mut grads.dense_w, &pass.dropped, &dlogits);
    for (g, &d) in grads.dense_b.iter_mut().zip(&dlogits) {
        *g += d;
    }
    let mut d_pooled = vec![T::zero(); hidden];
    mat_vec(&params.dense_w, &dlogits, &mut d_pooled);
    if let Some(mask) = &pass.mask {
        for (d, &m) in d_pooled.iter_mut().zip(mask) {
            *d *= m;
        }
    }
    let inv_len = T::one() / T::lit(pass.steps.len() as f64);
    let d_step: Vec<T> = d_pooled.iter().map(|&d| d * inv_len).collect();

    let mut dh_next = vec![T::zero(); hidden];
    let mut dcell_next = vec![T::zero(); hidden];
    let mut dh = vec![T::zero(); hidden];
    for t in (0..pass.steps.len()).rev() {
        for k in 0..hidden {
            dh[k] = d_step[k] + dh_next[k];
        }
        let (d_input, dcell_prev) =
            lstm::step_backward(&pass.steps[t], &dh, &dcell_next, &params.w, &mut grads.w, &mut grads.b);
        for (g, &d) in grads.embed.row_mut(pass.inputs[t]).iter_mut().zip(&d_input[..e]) {
            *g += d;
        }
        dh_next.copy_from_slice(&d_input[e..]);
        dcell_next = dcell_prev;
    }
}

impl InstanceConfig {
    pub fn gradcheck() -> Self {
        Self {
            embed_dim: 3,
            hidden_dim: 4,
            vocab_size: 7,
            num_classes: 3,
            max_len: 6,
            dropout: 0.1,
        }
    }
}

/// Finite-difference check of [`backward_head`] with a fixed dropout mask.
pub fn grad_check(cfg: &InstanceConfig, rng: &mut Rng, tolerance: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.hidden_dim > 8 {
        return Err(InstanceError::InvalidConfig(
            "gradient check needs hidden_dim <= 8".into(),
        ));
    }
    let mut params = InstanceHeadParams::<f64>::zeros(cfg);
    for (_, buf) in params.views_mut() {
        uniform_fill(buf, 0.5, rng);
    }
    let n = cfg.max_len.min(5);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let labels = LabelVector((0..cfg.num_classes).map(|_| rng.random::<bool>()).collect());
    // Scale the surviving units non-uniformly so the mask path is exercised.
    let mut mask = dropout_mask::<f64>(cfg.hidden_dim, cfg.dropout, rng);
    let jitter: Vec<f64> = standard_normal_vec(cfg.hidden_dim, rng);
    for (m, j) in mask.iter_mut().zip(jitter) {
        *m *= 1.0 + 0.1 * j;
    }

    let pass = forward_head(&tokens, &params, Some(&mask), cfg.max_len)?;
    if !selection_loss_from_logits(&pass.logits, &labels)?.is_finite() {
        return Err(InstanceError::NonFiniteLoss);
    }
    let mut analytic = params.zeros_like();
    backward_head(&pass, &labels, &params, 1.0, &mut analytic);
    let loss = |p: &InstanceHeadParams<f64>| {
        let pass = forward_head(&tokens, p, Some(&mask), cfg.max_len).expect("validated above");
        selection_loss_from_logits(&pass.logits, &labels).expect("lengths match")
    };
    Ok(check_gradients(&params, &analytic, loss, FD_STEP, tolerance))
}

/// One encoded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceExample {
    pub tokens: Vec<usize>,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrainConfig {
    /// Learning rate reached at the end of warm-up.
    pub target_lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    pub seed: u64,
}

impl InstanceTrainConfig {
    /// Target 5e-5, batch 32, 250K iterations, 10% warm-up.
    pub fn full(seed: u64) -> Self {
        Self {
            target_lr: 5e-5,
            batch_size: 32,
            iterations: 250_000,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            log_every: 1000,
            seed,
        }
    }

    /// Scratch encoder at desk scale: larger target rate, fewer iterations.
    pub fn desk(seed: u64) -> Self {
        Self {
            target_lr: 1e-2,
            batch_size: 32,
            iterations: 3000,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            log_every: 100,
            seed,
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        warmup_lr(self.target_lr, iteration, self.iterations, self.warmup_fraction)
    }
}

/// Resumable training loop for the instance head.
#[derive(Debug, Clone)]
pub struct InstanceTrainer {
    pub config: InstanceConfig,
    pub train_config: InstanceTrainConfig,
    pub params: InstanceHeadParams<f32>,
    pub adam: AdamState<InstanceHeadParams<f32>>,
    pub rng: Rng,
    pub iteration: u64,
    pub curve: LossCurve,
    pub window: LossWindow,
    sampler: BatchSampler,
}

impl InstanceTrainer {
    pub fn new(config: InstanceConfig, train_config: InstanceTrainConfig, n_examples: usize) -> Result<Self> {
        if n_examples == 0 {
            return Err(InstanceError::EmptyDataset);
        }
        let mut rng = crate::tensor::seeded_rng(train_config.seed);
        let params = InstanceHeadParams::init(&config, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            sampler: BatchSampler::new(n_examples, train_config.batch_size, train_config.seed),
            config,
            train_config,
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
        config: InstanceConfig,
        train_config: InstanceTrainConfig,
        params: InstanceHeadParams<f32>,
        adam: AdamState<InstanceHeadParams<f32>>,
        rng_state: &RngState,
        iteration: u64,
        curve: LossCurve,
        n_examples: usize,
    ) -> Result<Self> {
        if n_examples == 0 {
            return Err(InstanceError::EmptyDataset);
        }
        let rng = rng_state
            .restore()
            .ok_or_else(|| InstanceError::InvalidConfig("malformed rng state".into()))?;
        Ok(Self {
            sampler: BatchSampler::new(n_examples, train_config.batch_size, train_config.seed),
            config,
            train_config,
            params,
            adam,
            rng,
            iteration,
            curve,
            window: LossWindow::default(),
        })
    }

    /// One optimizer step. Returns the batch loss (mean over examples of the
    /// per-example summed cross-entropy).
    pub fn step(&mut self, examples: &[InstanceExample]) -> Result<f64> {
        let batch = self.sampler.batch(self.iteration);
        let weight = 1.0f32 / batch.len() as f32;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for &i in &batch {
            let ex = &examples[i];
            let mask = dropout_mask::<f32>(self.params.hidden_dim(), self.config.dropout, &mut self.rng);
            let pass = forward_head(&ex.tokens, &self.params, Some(&mask), self.config.max_len)?;
            loss += selection_loss_from_logits(&pass.logits, &ex.labels)?;
            backward_head(&pass, &ex.labels, &self.params, weight, &mut grads);
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(InstanceError::NonFiniteLoss);
        }
        if let Some(max) = self.train_config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let lr = self.train_config.lr_at(self.iteration);
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.train_config.adam)?;
        self.iteration += 1;
        self.window.add(loss);
        if self.iteration.is_multiple_of(self.train_config.log_every.max(1))
            || self.iteration == self.train_config.iterations
        {
            let mean = self.window.take_mean();
            log::info!("iteration {} loss {:.4}", self.iteration, mean);
            self.curve.push(self.iteration, mean);
        }
        Ok(loss)
    }

    pub fn run_until(&mut self, examples: &[InstanceExample], iteration: u64) -> Result<()> {
        while self.iteration < iteration.min(self.train_config.iterations) {
            self.step(examples)?;
        }
        Ok(())
    }

    pub fn run(&mut self, examples: &[InstanceExample]) -> Result<()> {
        self.run_until(examples, self.train_config.iterations)
    }
}

/// Trains a fresh head on `examples`.
pub fn train_instance_head(
    examples: &[InstanceExample],
    config: InstanceConfig,
    train_config: InstanceTrainConfig,
) -> Result<(InstanceHeadParams<f32>, LossCurve)> {
    let mut trainer = InstanceTrainer::new(config, train_config, examples.len())?;
    trainer.run(examples)?;
    Ok((trainer.params, trainer.curve))
}

/// Mean per-example loss over a dataset in inference mode.
pub fn mean_loss<T: Real>(examples: &[InstanceExample], params: &InstanceHeadParams<T>, max_len: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(InstanceError::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in examples {
        let pass = forward_head(&ex.tokens, params, None, max_len)?;
        total += selection_loss_from_logits(&pass.logits, &ex.labels)?;
    }
    Ok(total / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;

    fn labels(bits: &[u8]) -> LabelVector {
        LabelVector(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(selection_loss(&[1.0, 0.0], &labels(&[1, 0])).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((selection_loss(&[0.5], &labels(&[1])).unwrap() - ln2).abs() < 1e-12);
        for y in [[0, 0, 0], [1, 0, 1], [1, 1, 1]] {
            let l = selection_loss(&[0.5; 3], &labels(&y)).unwrap();
            assert!((l - 3.0 * ln2).abs() < 1e-12);
            let l = selection_loss_from_logits(&[0.0f64; 3], &labels(&y)).unwrap();
            assert!((l - 3.0 * ln2).abs() < 1e-12);
        }
        assert!(matches!(
            selection_loss(&[0.5], &labels(&[1, 0])),
            Err(InstanceError::LengthMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn stable_loss_handles_extreme_logits() {
        let l = selection_loss_from_logits(&[800.0f64, -800.0], &labels(&[1, 0])).unwrap();
        assert_eq!(l, 0.0);
        let l = selection_loss_from_logits(&[-800.0f64], &labels(&[1])).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let logits = [0.3f64, -1.7, 2.2, 0.0];
        let y = labels(&[1, 0, 0, 1]);
        let g = logit_gradient(&logits, &y);
        for k in 0..4 {
            let mut plus = logits;
            let mut minus = logits;
            plus[k] += 1e-6;
            minus[k] -= 1e-6;
            let fd = (selection_loss_from_logits(&plus, &y).unwrap() - selection_loss_from_logits(&minus, &y).unwrap())
                / 2e-6;
            assert!((g[k] - fd).abs() < 1e-6);
            let p = sigmoid(logits[k]);
            assert_eq!(g[k], p - if y.0[k] { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn zero_weights_give_one_half() {
        let cfg = InstanceConfig::gradcheck();
        let p = InstanceHeadParams::<f64>::zeros(&cfg);
        let probs = instance_probs(&[3, 4], &p, cfg.max_len).unwrap();
        assert_eq!(probs, vec![0.5; 3]);
    }

    #[test]
    fn two_class_scalar_oracle() {
        let cfg = InstanceConfig {
            embed_dim: 1,
            hidden_dim: 1,
            vocab_size: 4,
            num_classes: 2,
            max_len: 4,
            dropout: 0.1,
        };
        let mut p = InstanceHeadParams::<f64>::zeros(&cfg);
        // w rows: [x, h]; cols: [cand, forget, out]
        p.embed = Mat::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![0.8]]).unwrap();
        p.w = Mat::from_rows(&[vec![1.2, -0.4, 0.5], vec![0.3, 0.2, -0.6]]).unwrap();
        p.b = vec![0.1, 0.0, 0.2];
        p.dense_w = Mat::from_rows(&[vec![2.0, -1.0]]).unwrap();
        p.dense_b = vec![0.05, 0.3];

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (mut h, mut c, mut sum) = (0.0f64, 0.0f64, 0.0);
        for _ in 0..2 {
            let x = 0.8;
            let g = (1.2 * x + 0.3 * h + 0.1).tanh();
            let f = sig(-0.4 * x + 0.2 * h);
            let o = sig(0.5 * x - 0.6 * h + 0.2);
            c = f * c + (1.0 - f) * g;
            h = o * c.tanh();
            sum += h;
        }
        let pooled = sum / 2.0;
        let want = [sig(2.0 * pooled + 0.05), sig(-pooled + 0.3)];
        let got = instance_probs(&[3, 3], &p, 4).unwrap();
        for k in 0..2 {
            assert!((got[k] - want[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn single_char_query_pools_to_its_hidden_state() {
        let cfg = InstanceConfig::gradcheck();
        let p = InstanceHeadParams::<f64>::init(&cfg, &mut seeded_rng(1)).unwrap();
        let pooled = encode_query(&[5], &p, &cfg, Mode::Infer, &mut seeded_rng(0)).unwrap();
        let mut input = p.embed.row(5).to_vec();
        input.extend(vec![0.0; cfg.hidden_dim]);
        let (h, _, _) = lstm::step_forward(input, &vec![0.0; cfg.hidden_dim], &p.w, &p.b);
        assert_eq!(pooled, h);
    }

    #[test]
    fn infer_mode_is_deterministic_and_validates() {
        let cfg = InstanceConfig::gradcheck();
        let p = InstanceHeadParams::<f64>::init(&cfg, &mut seeded_rng(1)).unwrap();
        let a = encode_query(&[3, 4, 5], &p, &cfg, Mode::Infer, &mut seeded_rng(1)).unwrap();
        let b = encode_query(&[3, 4, 5], &p, &cfg, Mode::Infer, &mut seeded_rng(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            encode_query(&[], &p, &cfg, Mode::Infer, &mut seeded_rng(1)),
            Err(InstanceError::EmptyQuery)
        );
    }

    #[test]
    fn train_mode_dropout_rate_within_three_sigma() {
        let n = 200_000usize;
        let mask: Vec<f64> = dropout_mask(n, 0.1, &mut seeded_rng(5));
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((zeros - 0.1 * n as f64).abs() < 3.0 * sigma, "zeros {zeros}");
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.9).abs() < 1e-12));
    }

    #[test]
    fn head_grad_check_passes() {
        let report = grad_check(&InstanceConfig::gradcheck(), &mut seeded_rng(23), 1e-4).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.groups.len(), 5);
    }

    #[test]
    fn catalog_rejects_duplicates_and_unknown() {
        assert_eq!(
            ClassCatalog::new(vec!["cup".into(), "cup".into()]),
            Err(InstanceError::DuplicateClass("cup".into()))
        );
        let cat = ClassCatalog::from_labels(["table", "bottle", "table"]);
        assert_eq!(cat.names(), ["bottle", "table"]);
        assert_eq!(cat.label_vector(&["table"]).unwrap(), labels(&[0, 1]));
        assert_eq!(
            cat.label_vector(&["dog"]),
            Err(InstanceError::UnknownClass("dog".into()))
        );
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(logits in proptest::collection::vec(-30.0f64..30.0, 1..6), seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let y = LabelVector(logits.iter().map(|_| rng.random::<bool>()).collect());
            prop_assert!(selection_loss_from_logits(&logits, &y).unwrap() >= 0.0);
        }

        #[test]
        fn permuting_classes_permutes_probs(seed in any::<u64>()) {
            let cfg = InstanceConfig::gradcheck();
            let p = InstanceHeadParams::<f64>::init(&cfg, &mut seeded_rng(seed)).unwrap();
            let perm = [2usize, 0, 1];
            let mut q = p.clone();
            for (new, &old) in perm.iter().enumerate() {
                for r in 0..cfg.hidden_dim {
                    q.dense_w.set(r, new, p.dense_w.at(r, old));
                }
                q.dense_b[new] = p.dense_b[old];
            }
            let a = instance_probs(&[3, 6, 4], &p, 6).unwrap();
            let b = instance_probs(&[3, 6, 4], &q, 6).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(b[new], a[old]);
            }
            prop_assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
