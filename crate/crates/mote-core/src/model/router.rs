//! Linear top-1 router over the routed experts.
//!
//! The shared expert sits outside the router entirely: softmax runs over
//! the E routed experts only, and gate probabilities are never renormalized
//! after selection.

use super::Param;
use crate::tensor::{self, Matrix, Scalar};

#[derive(Clone, Debug)]
pub struct Router<T> {
    /// E x d_model, no bias.
    pub w: Param<T>,
}

impl<T: Scalar> Router<T> {
    pub fn new(w: Matrix<T>) -> Self {
        Router { w: Param::new(w) }
    }

    pub fn n_experts(&self) -> usize {
        self.w.w.rows()
    }

    /// Returns per-token softmax probabilities (n x E) and the argmax
    /// expert per token, ties resolved to the lowest index.
    pub fn gate(&self, x: &Matrix<T>) -> (Matrix<T>, Vec<u32>) {
        let mut probs = tensor::matmul_nt(x, &self.w.w);
        let mut top1 = Vec::with_capacity(x.rows());
        for t in 0..probs.rows() {
            let row = probs.row_mut(t);
            tensor::softmax_in_place(row);
            top1.push(tensor::argmax_first(row) as u32);
        }
        (probs, top1)
    }

    /// Backward from d(probs-logits path): given d logits, accumulates the
    /// router weight gradient and returns dx.
    pub fn backward(&mut self, x: &Matrix<T>, dlogits: &Matrix<T>) -> Matrix<T> {
        if !self.w.frozen {
            tensor::matmul_tn_acc(dlogits, x, &mut self.w.g);
        }
        tensor::matmul_nn(dlogits, &self.w.w)
    }

    pub fn cast<U: Scalar>(&self) -> Router<U> {
        Router {
            w: self.w.cast(),
        }
    }
}

/// Softmax backward for one token's gate: given dL/dprobs, returns
/// dL/dlogits.
pub fn softmax_backward_row<T: Scalar>(probs: &[T], dprobs: &[T], out: &mut [T]) {
    let mut inner = T::zero();
    for (p, d) in probs.iter().zip(dprobs) {
        inner = inner + *p * *d;
    }
    for ((o, p), d) in out.iter_mut().zip(probs).zip(dprobs) {
        *o = *p * (*d - inner);
    }
}
