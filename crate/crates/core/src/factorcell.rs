//! Context-adapted coupled-gate LSTM language model.
//!
//! The recurrent weight is `W' = W + A` where the low-rank adaptation
//! `A = L · R` is built from a context vector `c` and two basis tensors:
//!
//! * `L[j, p] = Σ_i c[i] · Z_L[i, j, p]`, shape `(e+h) × r`
//! * `R[p, k] = Σ_i Z_R[p, k, i] · c[i]`, shape `r × 3h`
//!
//! The contractions are done by reshaping `Z_L` to `m × ((e+h) r)` and `Z_R`
//! to `(r · 3h) × m`, which leaves element order untouched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng as _;

use crate::gradcheck::{check_gradients, GradCheckReport, FD_STEP};
use crate::lstm::{self, StepCache};
use crate::params::{ParamSet, ParamView};
use crate::tensor::{
    add_outer, dot, log_softmax_in_place, mat_vec, standard_normal_vec, uniform_fill, vec_mat, xavier_bound, Mat, Real,
    Rng, Tensor3, TensorError,
};
use crate::vocab::EOQ;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorCellError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("character id {id} out of range for vocabulary of size {vocab_size}")]
    CharOutOfRange { id: usize, vocab_size: usize },
    #[error("query of {len} characters exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },
    #[error("token sequence must be non-empty and end with <EOQ>")]
    MissingEndOfQuery,
    #[error("context has {got} entries, expected {expected}")]
    ContextDim { expected: usize, got: usize },
    #[error("non-finite loss encountered")]
    NonFiniteLoss,
}

pub type Result<T, E = FactorCellError> = std::result::Result<T, E>;

/// Architecture dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Character embedding size `e`.
    pub embed_dim: usize,
    /// Hidden size `h`.
    pub hidden_dim: usize,
    /// Adaptation rank `r`.
    pub rank: usize,
    /// Context size `m`.
    pub context_dim: usize,
    /// Size of the raw precomputed image feature vector.
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Maximum query length in characters (excluding `<EOQ>`).
    pub max_len: usize,
}

impl ModelConfig {
    /// Gate blocks per step: candidate, coupled forget, output.
    pub const GATE_BLOCKS: usize = 3;

    /// e=24, h=512, r=64, m=128, max_len=50.
    pub fn full(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            embed_dim: 24,
            hidden_dim: 512,
            rank: 64,
            context_dim: 128,
            feature_dim,
            vocab_size,
            max_len: 50,
        }
    }

    /// e=16, h=64, r=8, m=16, max_len=50.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            embed_dim: 16,
            hidden_dim: 64,
            rank: 8,
            context_dim: 16,
            feature_dim,
            vocab_size,
            max_len: 50,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embed_dim + self.hidden_dim
    }

    pub fn gate_dim(&self) -> usize {
        Self::GATE_BLOCKS * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("rank", self.rank),
            ("context_dim", self.context_dim),
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(FactorCellError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size <= EOQ {
            return Err(FactorCellError::InvalidConfig(
                "vocab_size must include the special tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable parameters of the adapted language model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorCellParams<T> {
    /// `vocab × e`
    pub embed: Mat<T>,
    /// `(e+h) × 3h`
    pub w: Mat<T>,
    pub b: Vec<T>,
    /// `m × (e+h) × r`
    pub z_left: Tensor3<T>,
    /// `r × 3h × m`
    pub z_right: Tensor3<T>,
    /// `feature_dim × m`
    pub proj_w: Mat<T>,
    pub proj_b: Vec<T>,
    /// `h × vocab`
    pub out_w: Mat<T>,
    pub out_b: Vec<T>,
}

impl<T: Real> FactorCellParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h, r, m) = (cfg.embed_dim, cfg.hidden_dim, cfg.rank, cfg.context_dim);
        Self {
            embed: Mat::zeros(cfg.vocab_size, e),
            w: Mat::zeros(e + h, 3 * h),
            b: vec![T::zero(); 3 * h],
            z_left: Tensor3::zeros(m, e + h, r),
            z_right: Tensor3::zeros(r, 3 * h, m),
            proj_w: Mat::zeros(cfg.feature_dim, m),
            proj_b: vec![T::zero(); m],
            out_w: Mat::zeros(h, cfg.vocab_size),
            out_b: vec![T::zero(); cfg.vocab_size],
        }
    }

    /// Xavier-uniform weights, zero biases. The basis tensors are further
    /// damped by `1/sqrt(r)` so the initial adaptation is close to zero.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (e, h, r, m) = (cfg.embed_dim, cfg.hidden_dim, cfg.rank, cfg.context_dim);
        let mut p = Self::zeros(cfg);
        uniform_fill(p.embed.data_mut(), xavier_bound(cfg.vocab_size, e), rng);
        uniform_fill(p.w.data_mut(), xavier_bound(e + h, 3 * h), rng);
        let damp = 1.0 / (r as f64).sqrt();
        uniform_fill(p.z_left.data_mut(), xavier_bound(m, (e + h) * r) * damp, rng);
        uniform_fill(p.z_right.data_mut(), xavier_bound(r * 3 * h, m) * damp, rng);
        uniform_fill(p.proj_w.data_mut(), xavier_bound(cfg.feature_dim, m), rng);
        uniform_fill(p.out_w.data_mut(), xavier_bound(h, cfg.vocab_size), rng);
        Ok(p)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.out_w.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn context_dim(&self) -> usize {
        self.proj_b.len()
    }

    pub fn cast<U: Real>(&self) -> FactorCellParams<U> {
        FactorCellParams {
            embed: self.embed.cast(),
            w: self.w.cast(),
            b: crate::tensor::cast_slice(&self.b),
            z_left: self.z_left.cast(),
            z_right: self.z_right.cast(),
            proj_w: self.proj_w.cast(),
            proj_b: crate::tensor::cast_slice(&self.proj_b),
            out_w: self.out_w.cast(),
            out_b: crate::tensor::cast_slice(&self.out_b),
        }
    }

    /// Affine projection of raw image features to the context space.
    pub fn project(&self, features: &[T]) -> Result<ContextVector<T>> {
        if features.len() != self.proj_w.rows() {
            return Err(FactorCellError::ContextDim {
                expected: self.proj_w.rows(),
                got: features.len(),
            });
        }
        let mut c = self.proj_b.clone();
        for (r, &f) in features.iter().enumerate() {
            crate::tensor::axpy(f, self.proj_w.row(r), &mut c);
        }
        Ok(ContextVector(c))
    }

    pub fn resolve(&self, ctx: &Context<'_, T>) -> Result<ContextVector<T>> {
        match ctx {
            Context::Features(f) => self.project(f),
            Context::Vector(c) => {
                if c.0.len() != self.context_dim() {
                    return Err(FactorCellError::ContextDim {
                        expected: self.context_dim(),
                        got: c.0.len(),
                    });
                }
                Ok((*c).clone())
            }
        }
    }

    /// `W' = W + A(c)`.
    pub fn adapted_weights(&self, c: &ContextVector<T>) -> Result<Mat<T>> {
        let a = compute_adaptation(c, &self.z_left, &self.z_right)?;
        Ok(self.w.add(&a)?)
    }
}

impl<T: Real> ParamSet<T> for FactorCellParams<T> {
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
                name: "z_left",
                shape: self.z_left.shape().to_vec(),
                data: self.z_left.data(),
            },
            ParamView {
                name: "z_right",
                shape: self.z_right.shape().to_vec(),
                data: self.z_right.data(),
            },
            ParamView {
                name: "proj_w",
                shape: self.proj_w.shape().to_vec(),
                data: self.proj_w.data(),
            },
            ParamView {
                name: "proj_b",
                shape: vec![self.proj_b.len()],
                data: &self.proj_b,
            },
            ParamView {
                name: "out_w",
                shape: self.out_w.shape().to_vec(),
                data: self.out_w.data(),
            },
            ParamView {
                name: "out_b",
                shape: vec![self.out_b.len()],
                data: &self.out_b,
            },
        ]
    }

    fn views_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("embed", self.embed.data_mut()),
            ("w", self.w.data_mut()),
            ("b", &mut self.b),
            ("z_left", self.z_left.data_mut()),
            ("z_right", self.z_right.data_mut()),
            ("proj_w", self.proj_w.data_mut()),
            ("proj_b", &mut self.proj_b),
            ("out_w", self.out_w.data_mut()),
            ("out_b", &mut self.out_b),
        ]
    }
}

/// The `m`-dimensional context `c` fed into the adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector<T>(pub Vec<T>);

impl<T: Real> ContextVector<T> {
    pub fn zeros(m: usize) -> Self {
        Self(vec![T::zero(); m])
    }

    /// I.i.d. standard normal context, the no-image baseline.
    pub fn noise(m: usize, rng: &mut Rng) -> Self {
        Self(standard_normal_vec(m, rng))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

/// Where the context comes from: raw features go through the trainable
/// projection, a ready vector is used as is.
#[derive(Debug, Clone, Copy)]
pub enum Context<'a, T> {
    Features(&'a [T]),
    Vector(&'a ContextVector<T>),
}

/// Hidden and cell state of the recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<T> {
    pub h: Vec<T>,
    pub cell: Vec<T>,
}

impl<T: Real> CellState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![T::zero(); hidden],
            cell: vec![T::zero(); hidden],
        }
    }
}

/// Left and right factors of the adaptation, `(L, R)`.
pub fn adaptation_factors<T: Real>(
    c: &ContextVector<T>,
    z_left: &Tensor3<T>,
    z_right: &Tensor3<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    let [m, in_dim, r] = z_left.shape();
    let [r2, gate_dim, m2] = z_right.shape();
    if r != r2 || m != m2 {
        return Err(TensorError::ShapeMismatch {
            op: "compute_adaptation",
            left: z_left.shape().to_vec(),
            right: z_right.shape().to_vec(),
        }
        .into());
    }
    if c.0.len() != m {
        return Err(FactorCellError::ContextDim {
            expected: m,
            got: c.0.len(),
        });
    }
    let zl = z_left.reshape_to_mat(m, in_dim * r)?;
    let mut left = vec![T::zero(); in_dim * r];
    vec_mat(&c.0, &zl, &mut left);

    let zr = z_right.reshape_to_mat(r * gate_dim, m)?;
    let mut right = vec![T::zero(); r * gate_dim];
    mat_vec(&zr, &c.0, &mut right);

    Ok((Mat::from_vec(in_dim, r, left)?, Mat::from_vec(r, gate_dim, right)?))
}

/// Low-rank adaptation `A = L · R`, shape `(e+h) × 3h`.
pub fn compute_adaptation<T: Real>(c: &ContextVector<T>, z_left: &Tensor3<T>, z_right: &Tensor3<T>) -> Result<Mat<T>> {
    let (l, r) = adaptation_factors(c, z_left, z_right)?;
    Ok(l.matmul(&r)?)
}

/// One recurrence step with adapted weights `wp`.
pub fn step<T: Real>(
    token: usize,
    state: &CellState<T>,
    wp: &Mat<T>,
    params: &FactorCellParams<T>,
) -> Result<CellState<T>> {
    let (next, _) = step_cached(token, state, wp, params)?;
    Ok(next)
}

fn step_cached<T: Real>(
    token: usize,
    state: &CellState<T>,
    wp: &Mat<T>,
    params: &FactorCellParams<T>,
) -> Result<(CellState<T>, StepCache<T>)> {
    if token >= params.vocab_size() {
        return Err(FactorCellError::CharOutOfRange {
            id: token,
            vocab_size: params.vocab_size(),
        });
    }
    let mut input = Vec::with_capacity(params.embed_dim() + state.h.len());
    input.extend_from_slice(params.embed.row(token));
    input.extend_from_slice(&state.h);
    let (h, cell, cache) = lstm::step_forward(input, &state.cell, wp, &params.b);
    Ok((CellState { h, cell }, cache))
}

/// Next-character log-probabilities from a hidden state.
pub fn output_log_probs<T: Real>(h: &[T], params: &FactorCellParams<T>) -> Vec<T> {
    let mut logits = params.out_b.clone();
    for (r, &hr) in h.iter().enumerate() {
        crate::tensor::axpy(hr, params.out_w.row(r), &mut logits);
    }
    log_softmax_in_place(&mut logits);
    logits
}

/// Incremental decoder over a fixed context, used for scoring and beam
/// search. Holds the adapted weights so they are built once per query.
#[derive(Debug, Clone)]
pub struct Decoder<'a, T> {
    params: &'a FactorCellParams<T>,
    wp: Mat<T>,
}

impl<'a, T: Real> Decoder<'a, T> {
    pub fn new(params: &'a FactorCellParams<T>, ctx: &Context<'_, T>) -> Result<Self> {
        let c = params.resolve(ctx)?;
        let wp = params.adapted_weights(&c)?;
        Ok(Self { params, wp })
    }

    /// State after consuming the start token.
    pub fn start(&self) -> Result<(CellState<T>, Vec<T>)> {
        self.advance(&CellState::zeros(self.params.hidden_dim()), EOQ)
    }

    /// Feeds `token`, returning the new state and next-token log-probs.
    pub fn advance(&self, state: &CellState<T>, token: usize) -> Result<(CellState<T>, Vec<T>)> {
        let next = step(token, state, &self.wp, self.params)?;
        let lp = output_log_probs(&next.h, self.params);
        Ok((next, lp))
    }

    pub fn params(&self) -> &FactorCellParams<T> {
        self.params
    }
}

/// Activations recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    inputs: Vec<usize>,
    steps: Vec<StepCache<T>>,
    hiddens: Vec<Vec<T>>,
    context: ContextVector<T>,
    features: Option<Vec<T>>,
    left: Mat<T>,
    right: Mat<T>,
    wp: Mat<T>,
}

/// Teacher-forced pass over one query.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// Log-probabilities over the vocabulary at each position.
    pub log_probs: Vec<Vec<T>>,
    /// Target token at each position (query characters then `<EOQ>`).
    pub targets: Vec<usize>,
    pub cache: ForwardCache<T>,
}

impl<T: Real> ForwardPass<T> {
    /// Per-position negative log-likelihood.
    pub fn char_nlls(&self) -> Vec<T> {
        self.log_probs
            .iter()
            .zip(&self.targets)
            .map(|(lp, &t)| -lp[t])
            .collect()
    }

    /// Summed negative log-likelihood, accumulated in `f64`.
    pub fn total_nll(&self) -> f64 {
        self.char_nlls().iter().map(|v| v.as_f64()).sum()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Runs the model over `tokens` (query characters followed by `<EOQ>`).
/// The input sequence is `<EOQ>` followed by all but the last token.
pub fn forward<T: Real>(
    tokens: &[usize],
    ctx: &Context<'_, T>,
    params: &FactorCellParams<T>,
    max_len: usize,
) -> Result<ForwardPass<T>> {
    if tokens.last() != Some(&EOQ) {
        return Err(FactorCellError::MissingEndOfQuery);
    }
    if tokens.len() - 1 > max_len {
        return Err(FactorCellError::Overlength {
            len: tokens.len() - 1,
            max_len,
        });
    }
    let c = params.resolve(ctx)?;
    let (left, right) = adaptation_factors(&c, &params.z_left, &params.z_right)?;
    let wp = params.w.add(&left.matmul(&right)?)?;

    let mut inputs = Vec::with_capacity(tokens.len());
    inputs.push(EOQ);
    inputs.extend_from_slice(&tokens[..tokens.len() - 1]);

    let mut state = CellState::zeros(params.hidden_dim());
    let mut steps = Vec::with_capacity(inputs.len());
    let mut hiddens = Vec::with_capacity(inputs.len());
    let mut log_probs = Vec::with_capacity(inputs.len());
    for &tok in &inputs {
        let (next, cache) = step_cached(tok, &state, &wp, params)?;
        log_probs.push(output_log_probs(&next.h, params));
        hiddens.push(next.h.clone());
        steps.push(cache);
        state = next;
    }
    Ok(ForwardPass {
        log_probs,
        targets: tokens.to_vec(),
        cache: ForwardCache {
            inputs,
            steps,
            hiddens,
            context: c,
            features: match ctx {
                Context::Features(f) => Some(f.to_vec()),
                Context::Vector(_) => None,
            },
            left,
            right,
            wp,
        },
    })
}

/// Gradients of the mean per-character cross-entropy of `pass`.
pub fn backward<T: Real>(pass: &ForwardPass<T>, params: &FactorCellParams<T>) -> FactorCellParams<T> {
    let weight = T::one() / T::lit(pass.len() as f64);
    let mut grads = params.zeros_like();
    backward_into(pass, params, weight, &mut grads);
    grads
}

/// Accumulates `weight · ∂(Σ_t NLL_t)/∂θ` into `grads`.
pub fn backward_into<T: Real>(
    pass: &ForwardPass<T>,
    params: &FactorCellParams<T>,
    weight: T,
    grads: &mut FactorCellParams<T>,
) {
    let cache = &pass.cache;
    let e = params.embed_dim();
    let hidden = params.hidden_dim();
    let mut d_wp = Mat::zeros(cache.wp.rows(), cache.wp.cols());
    let mut dh_next = vec![T::zero(); hidden];
    let mut dcell_next = vec![T::zero(); hidden];
    let mut dh = vec![T::zero(); hidden];

    for t in (0..pass.len()).rev() {
        let mut dlogits: Vec<T> = pass.log_probs[t].iter().map(|&lp| weight * lp.exp()).collect();
        dlogits[pass.targets[t]] -= weight;

        add_outer(&mut grads.out_w, &cache.hiddens[t], &dlogits);
        for (g, &d) in grads.out_b.iter_mut().zip(&dlogits) {
            *g += d;
        }
        mat_vec(&params.out_w, &dlogits, &mut dh);
        for (a, &b) in dh.iter_mut().zip(&dh_next) {
            *a += b;
        }

        let (d_input, dcell_prev) =
            lstm::step_backward(&cache.steps[t], &dh, &dcell_next, &cache.wp, &mut d_wp, &mut grads.b);
        let row = grads.embed.row_mut(cache.inputs[t]);
        for (g, &d) in row.iter_mut().zip(&d_input[..e]) {
            *g += d;
        }
        dh_next.copy_from_slice(&d_input[e..]);
        dcell_next = dcell_prev;
    }

    // W' = W + L·R
    for (g, &d) in grads.w.data_mut().iter_mut().zip(d_wp.data()) {
        *g += d;
    }
    let d_left = d_wp.matmul(&cache.right.transpose()).expect("shapes fixed by forward");
    let d_right = cache.left.transpose().matmul(&d_wp).expect("shapes fixed by forward");

    let c = cache.context.as_slice();
    let m = c.len();
    let mut dc = vec![T::zero(); m];

    // L = c · Z_L(m × (e+h) r)
    let zl_cols = d_left.data().len();
    for i in 0..m {
        let zl_row = &params.z_left.data()[i * zl_cols..(i + 1) * zl_cols];
        dc[i] += dot(zl_row, d_left.data());
        let g_row = &mut grads.z_left.data_mut()[i * zl_cols..(i + 1) * zl_cols];
        crate::tensor::axpy(c[i], d_left.data(), g_row);
    }
    // R = Z_R((r 3h) × m) · c
    for (q, &dr) in d_right.data().iter().enumerate() {
        let zr_row = &params.z_right.data()[q * m..(q + 1) * m];
        crate::tensor::axpy(dr, zr_row, &mut dc);
        let g_row = &mut grads.z_right.data_mut()[q * m..(q + 1) * m];
        crate::tensor::axpy(dr, c, g_row);
    }

    if let Some(features) = &cache.features {
        add_outer(&mut grads.proj_w, features, &dc);
        for (g, &d) in grads.proj_b.iter_mut().zip(&dc) {
            *g += d;
        }
    }
}

impl ModelConfig {
    /// Small dimensions for finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            embed_dim: 3,
            hidden_dim: 4,
            rank: 2,
            context_dim: 3,
            feature_dim: 3,
            vocab_size: 7,
            max_len: 6,
        }
    }
}

/// Checks [`backward`] against central finite differences on random `f64`
/// parameters, features and query.
pub fn grad_check(cfg: &ModelConfig, rng: &mut Rng, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(cfg, rng, tolerance, backward)
}

/// As [`grad_check`] with a caller-supplied gradient routine.
pub fn grad_check_with<B>(cfg: &ModelConfig, rng: &mut Rng, tolerance: f64, backward_fn: B) -> Result<GradCheckReport>
where
    B: Fn(&ForwardPass<f64>, &FactorCellParams<f64>) -> FactorCellParams<f64>,
{
    cfg.validate()?;
    if cfg.hidden_dim > 8 {
        return Err(FactorCellError::InvalidConfig(
            "gradient check needs hidden_dim <= 8".into(),
        ));
    }
    let mut params = FactorCellParams::<f64>::zeros(cfg);
    for (_, buf) in params.views_mut() {
        uniform_fill(buf, 0.5, rng);
    }
    let features: Vec<f64> = standard_normal_vec(cfg.feature_dim, rng);
    let n_chars = cfg.max_len.min(5);
    let n_real = cfg.vocab_size - crate::vocab::NUM_SPECIALS;
    let mut tokens: Vec<usize> = (0..n_chars)
        .map(|_| {
            if n_real == 0 {
                crate::vocab::UNK
            } else {
                crate::vocab::NUM_SPECIALS + rng.random_range(0..n_real)
            }
        })
        .collect();
    tokens.push(EOQ);

    let ctx = Context::Features(&features);
    let pass = forward(&tokens, &ctx, &params, cfg.max_len)?;
    if !pass.total_nll().is_finite() {
        return Err(FactorCellError::NonFiniteLoss);
    }
    let analytic = backward_fn(&pass, &params);
    let loss = |p: &FactorCellParams<f64>| {
        let pass = forward(&tokens, &ctx, p, cfg.max_len).expect("validated above");
        pass.total_nll() / pass.len() as f64
    };
    Ok(check_gradients(&params, &analytic, loss, FD_STEP, tolerance))
}
