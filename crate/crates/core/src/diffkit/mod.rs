//! Small differentiable toolkit: dense ReLU networks, an LSTM cell, softmax
//! and squared-error heads, Adam, and finite-difference gradient checks.
//!
//! Every forward pass returns an explicit tape; the matching `backward`
//! consumes it and accumulates parameter gradients into a block with the same
//! layout as the parameters.

mod adam;
mod checkpoint;
mod gradcheck;
mod lstm;
mod mlp;
mod ops;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::{LstmCell, LstmSpec, LstmTape};
pub use mlp::{Mlp, MlpSpec, MlpTape};
pub use ops::{argmax, mse, softmax, softmax_logprob_grad};
pub use params::{Layout, ParamBlock, TensorInfo};

use crate::Scalar;

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
