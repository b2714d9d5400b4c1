//! Loop kernels shared by the graph ops and the fused loss.

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Row-major matrix operand: `rows × cols` storage, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, F> Mat<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            trans: !self.trans,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = op(a)·op(b) + beta·out` where `out` is a contiguous `m × n` buffer.
pub(crate) fn gemm<F: Float>(a: Mat<'_, F>, b: Mat<'_, F>, beta: F, out: &mut [F]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and strides were checked against the buffer sizes
    // above; `out` is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stable log-sum-exp of a finite slice.
pub(crate) fn logsumexp<F: Float>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// In-place log-softmax of one row.
pub(crate) fn log_softmax_row<F: Float>(row: &mut [F]) {
    let lse = logsumexp(row);
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

/// In-place softmax of one row. `-inf` entries map to exactly zero.
pub(crate) fn softmax_row<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = if *v == F::neg_infinity() {
            F::zero()
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over a score vector that may contain `-inf` sentinels.
///
/// `-inf` entries receive probability exactly `0.0`; the finite entries form a
/// distribution over the finite support. A vector with no finite entry has no
/// support and is rejected.
pub fn softmax_with_neg_inf<F: Float>(scores: &[F]) -> Result<Tensor<F>> {
    if scores.iter().any(|v| v.is_nan() || *v == F::infinity()) {
        return Err(Error::contract("score vector may only contain finite values or -inf"));
    }
    if !scores.iter().any(|v| v.is_finite()) {
        return Err(Error::EmptySupport);
    }
    let mut out = scores.to_vec();
    softmax_row(&mut out);
    Tensor::new(vec![scores.len()], out)
}
