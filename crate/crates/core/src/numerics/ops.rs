//! Forward-only tensor functions. The differentiable versions live on
//! [`Tape`](super::Tape) and share these kernels.

use crate::error::{GagError, Result};

use super::scalar::Scalar;
use super::tape::{gelu_scalar, log_sum_exp};
use super::tensor::Tensor;

/// Axis along which [`softmax`] normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Numerically stable softmax (max-subtracted) along `axis` of a matrix;
/// vectors are treated as a single row.
pub fn softmax<F: Scalar>(v: &Tensor<F>, axis: Axis) -> Result<Tensor<F>> {
    if !v.is_finite() {
        return Err(GagError::Numeric("softmax input".into()));
    }
    let (r, c) = (v.rows(), v.cols());
    let mut out = v.data().to_vec();
    let (outer, inner, stride_outer, stride_inner) = match axis {
        Axis::Cols => (r, c, c, 1),
        Axis::Rows => (c, r, 1, c),
    };
    for o in 0..outer {
        let idx = |i: usize| o * stride_outer + i * stride_inner;
        let max = (0..inner).map(|i| out[idx(i)]).fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for i in 0..inner {
            let e = (out[idx(i)] - max).exp();
            out[idx(i)] = e;
            sum += e;
        }
        for i in 0..inner {
            out[idx(i)] /= sum;
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

/// Exact-erf GELU, elementwise.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// Mean of `-log softmax(logits)[target]` over unmasked rows.
pub fn nll_loss<F: Scalar>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> Result<F> {
    let (r, v) = (logits.rows(), logits.cols());
    if targets.len() != r || mask.len() != r {
        return Err(GagError::Dimension(format!(
            "{} rows, {} targets, {} mask entries",
            r,
            targets.len(),
            mask.len()
        )));
    }
    let mut total = F::zero();
    let mut count = 0usize;
    for i in 0..r {
        if !mask[i] {
            continue;
        }
        if targets[i] >= v {
            return Err(GagError::TokenRange {
                id: targets[i] as u32,
                vocab: v,
            });
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[targets[i]];
        count += 1;
    }
    if count == 0 {
        return Err(GagError::DegenerateMask);
    }
    Ok(total / F::c(count as f64))
}
