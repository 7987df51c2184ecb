//! Dense linear algebra and reverse-mode gradients.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Gradients, NodeId, Op, Tape};

use crate::error::{Error, Result};

/// Rows with a Euclidean norm below this cannot be normalized.
pub const EPS_NORM: f64 = 1e-8;

/// `x · w + b` with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::shape("affine", w.shape(), b.shape()));
    }
    x.matmul(w)?.add_row(b)
}

/// Row-wise softmax.
pub fn softmax(z: &Matrix) -> Matrix {
    z.softmax_rows()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(f: &Matrix) -> Result<Matrix> {
    f.l2_normalize_rows(EPS_NORM)
}

/// A scalar function together with its analytic gradient.
pub trait Differentiable {
    /// Returns the value at `params` and one gradient per parameter.
    fn value_and_grad(&self, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)>;

    /// Value only; defaults to discarding the gradient.
    fn value(&self, params: &[Matrix]) -> Result<f64> {
        self.value_and_grad(params).map(|(v, _)| v)
    }
}

impl<F> Differentiable for F
where
    F: Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    fn value_and_grad(&self, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
        self(params)
    }
}

/// Compares analytic gradients against central differences with step `h`.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)` over all
/// coordinates of all parameters.
pub fn finite_diff_check<F: Differentiable + ?Sized>(f: &F, params: &[Matrix], h: f64) -> Result<f64> {
    let (_, analytic) = f.value_and_grad(params)?;
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", analytic.len(), params.len())));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::shape("finite_diff_check", params[p].shape(), grad.shape()));
        }
        for k in 0..grad.data().len() {
            let orig = params[p].data()[k];
            probe[p].data_mut()[k] = orig + h;
            let up = f.value(&probe)?;
            probe[p].data_mut()[k] = orig - h;
            let down = f.value(&probe)?;
            probe[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
