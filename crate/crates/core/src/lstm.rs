//! Coupled input/forget gate LSTM step shared by the language model and the
//! query encoder.
//!
//! Gate pre-activations are laid out as three `h`-wide blocks
//! `[candidate, forget, output]`; the input gate is `1 - forget`.

use crate::tensor::{add_outer, mat_vec, sigmoid, vec_mat, Mat, Real};

/// Activations kept for the backward pass of one step.
#[derive(Debug, Clone)]
pub struct StepCache<T> {
    /// Concatenated `[x_t, h_{t-1}]`.
    pub input: Vec<T>,
    pub cell_prev: Vec<T>,
    pub candidate: Vec<T>,
    pub forget: Vec<T>,
    pub output: Vec<T>,
    pub tanh_cell: Vec<T>,
}

/// Runs one step. Returns `(h_t, cell_t, cache)`.
pub fn step_forward<T: Real>(input: Vec<T>, cell_prev: &[T], w: &Mat<T>, b: &[T]) -> (Vec<T>, Vec<T>, StepCache<T>) {
    let hidden = b.len() / 3;
    let mut z = vec![T::zero(); 3 * hidden];
    vec_mat(&input, w, &mut z);

    let mut candidate = Vec::with_capacity(hidden);
    let mut forget = Vec::with_capacity(hidden);
    let mut output = Vec::with_capacity(hidden);
    let mut cell = Vec::with_capacity(hidden);
    let mut tanh_cell = Vec::with_capacity(hidden);
    let mut h = Vec::with_capacity(hidden);
    for k in 0..hidden {
        let g = (z[k] + b[k]).tanh();
        let f = sigmoid(z[hidden + k] + b[hidden + k]);
        let o = sigmoid(z[2 * hidden + k] + b[2 * hidden + k]);
        let c = f * cell_prev[k] + (T::one() - f) * g;
        let tc = c.tanh();
        candidate.push(g);
        forget.push(f);
        output.push(o);
        cell.push(c);
        tanh_cell.push(tc);
        h.push(o * tc);
    }
    let cache = StepCache {
        input,
        cell_prev: cell_prev.to_vec(),
        candidate,
        forget,
        output,
        tanh_cell,
    };
    (h, cell, cache)
}

/// Backward through one step.
///
/// `dh` is the loss gradient w.r.t. `h_t`, `dcell` the gradient flowing into
/// `cell_t` from step `t + 1`. Accumulates into `dw`/`db` and returns
/// `(d_input, d_cell_prev)` where `d_input` covers `[x_t, h_{t-1}]`.
pub fn step_backward<T: Real>(
    cache: &StepCache<T>,
    dh: &[T],
    dcell: &[T],
    w: &Mat<T>,
    dw: &mut Mat<T>,
    db: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let hidden = cache.forget.len();
    let one = T::one();
    let mut dz = vec![T::zero(); 3 * hidden];
    let mut dcell_prev = vec![T::zero(); hidden];
    for k in 0..hidden {
        let o = cache.output[k];
        let tc = cache.tanh_cell[k];
        let f = cache.forget[k];
        let g = cache.candidate[k];
        let dc = dcell[k] + dh[k] * o * (one - tc * tc);
        let d_out = dh[k] * tc;
        let d_forget = dc * (cache.cell_prev[k] - g);
        let d_cand = dc * (one - f);
        dcell_prev[k] = dc * f;
        dz[k] = d_cand * (one - g * g);
        dz[hidden + k] = d_forget * f * (one - f);
        dz[2 * hidden + k] = d_out * o * (one - o);
    }
    add_outer(dw, &cache.input, &dz);
    for (d, &v) in db.iter_mut().zip(&dz) {
        *d += v;
    }
    let mut d_input = vec![T::zero(); cache.input.len()];
    mat_vec(w, &dz, &mut d_input);
    (d_input, dcell_prev)
}
