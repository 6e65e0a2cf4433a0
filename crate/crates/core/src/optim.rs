//! Adam with bias correction, global-norm clipping and linear warm-up.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: &'static str },
    #[error("gradient has {got} groups, parameters have {expected}")]
    GroupMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, stored in the same layout as the params.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub step: u64,
    pub m: P,
    pub v: P,
}

impl<P> AdamState<P> {
    pub fn new<T: Real>(params: &P) -> Self
    where
        P: ParamSet<T>,
    {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step<T: Real, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    let grad_views = grads.views();
    if let Some(bad) = grad_views.iter().find(|v| v.data.iter().any(|g| !g.is_finite())) {
        return Err(OptimError::NonFiniteGradient { group: bad.name });
    }
    let mut param_views = params.views_mut();
    if param_views.len() != grad_views.len() {
        return Err(OptimError::GroupMismatch {
            expected: param_views.len(),
            got: grad_views.len(),
        });
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let eps = T::lit(cfg.eps);
    let lr = T::lit(lr);

    let mut m_views = state.m.views_mut();
    let mut v_views = state.v.views_mut();
    for (g, ((p, m), v)) in grad_views
        .iter()
        .zip(param_views.iter_mut().zip(m_views.iter_mut()).zip(v_views.iter_mut()))
    {
        for i in 0..g.data.len() {
            let gi = g.data[i];
            let mi = b1 * m.1[i] + one_b1 * gi;
            let vi = b2 * v.1[i] + one_b2 * gi * gi;
            m.1[i] = mi;
            v.1[i] = vi;
            p.1[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// Linear warm-up from 0 to `target` over the first `warmup_fraction` of
/// `total` iterations, constant afterwards.
pub fn warmup_lr(target: f64, iteration: u64, total: u64, warmup_fraction: f64) -> f64 {
    let warmup = warmup_fraction * total as f64;
    if warmup <= 0.0 {
        return target;
    }
    target * (iteration as f64 / warmup).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamView;

    #[derive(Debug, Clone, PartialEq)]
    struct Scalars {
        x: Vec<f64>,
    }

    impl ParamSet<f64> for Scalars {
        fn views(&self) -> Vec<ParamView<'_, f64>> {
            vec![ParamView {
                name: "x",
                shape: vec![self.x.len()],
                data: &self.x,
            }]
        }
        fn views_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("x", &mut self.x)]
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Scalars { x: vec![1.0, -2.0] };
        let before = p.clone();
        let g = Scalars { x: vec![0.0, 0.0] };
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Scalars { x: vec![0.0, 0.0] };
        let g = Scalars { x: vec![0.3, -7.0] };
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
        for (dx, gi) in p.x.iter().zip(&g.x) {
            let expected = -0.01 * gi / (gi.abs() + cfg.eps);
            assert!((dx - expected).abs() < 1e-15);
        }
    }

    /// Scalar Adam written out longhand.
    fn reference_trace(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut theta) = (0.0, 0.0, 1.0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            theta -= lr * mhat / (vhat.sqrt() + eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn matches_scalar_trace_over_ten_steps() {
        let grads = [0.5, -0.2, 0.1, 0.9, -1.3, 0.0, 0.4, -0.05, 2.0, 0.3];
        let expected = reference_trace(&grads, 0.05);
        let mut p = Scalars { x: vec![1.0] };
        let mut st = AdamState::new(&p);
        for (g, want) in grads.iter().zip(expected) {
            adam_step(&mut p, &Scalars { x: vec![*g] }, &mut st, 0.05, &AdamConfig::default()).unwrap();
            assert!((p.x[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Scalars { x: vec![1.0] };
        let mut st = AdamState::new(&p);
        let err = adam_step(
            &mut p,
            &Scalars { x: vec![f64::NAN] },
            &mut st,
            0.1,
            &AdamConfig::default(),
        );
        assert_eq!(err, Err(OptimError::NonFiniteGradient { group: "x" }));
        assert_eq!(p.x, vec![1.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Scalars { x: vec![3.0, 4.0] };
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g.l2_norm() - 1.0).abs() < 1e-12);
        let mut small = Scalars { x: vec![0.3, 0.4] };
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.x, vec![0.3, 0.4]);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        let target = 5e-5;
        assert_eq!(warmup_lr(target, 0, 1000, 0.1), 0.0);
        assert!((warmup_lr(target, 50, 1000, 0.1) - 0.5 * target).abs() < 1e-18);
        assert_eq!(warmup_lr(target, 100, 1000, 0.1), target);
        assert_eq!(warmup_lr(target, 900, 1000, 0.1), target);
        assert_eq!(warmup_lr(target, 3, 1000, 0.0), target);
    }
}
