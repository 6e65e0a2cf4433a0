//! Uniform access to named parameter buffers, shared by the optimizer,
//! checkpointing and gradient checking.

use crate::tensor::Real;

/// A read-only named parameter buffer.
#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// A fixed, ordered collection of named parameter buffers.
///
/// `views` and `views_mut` must list the same buffers in the same order;
/// gradients are stored in a value of the same type.
pub trait ParamSet<T: Real>: Clone {
    fn views(&self) -> Vec<ParamView<'_, T>>;

    fn views_mut(&mut self) -> Vec<(&'static str, &mut [T])>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, buf) in out.views_mut() {
            buf.iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    fn num_params(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    /// `self += scale * other`, buffer by buffer.
    fn add_scaled(&mut self, other: &Self, scale: T) {
        let src = other.views();
        for ((_, dst), s) in self.views_mut().into_iter().zip(src) {
            for (d, &x) in dst.iter_mut().zip(s.data) {
                *d += scale * x;
            }
        }
    }

    fn scale(&mut self, factor: T) {
        for (_, buf) in self.views_mut() {
            buf.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn l2_norm(&self) -> f64 {
        self.views()
            .iter()
            .flat_map(|v| v.data.iter())
            .map(|&x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.views().iter().all(|v| v.data.iter().all(|x| x.is_finite()))
    }
}
