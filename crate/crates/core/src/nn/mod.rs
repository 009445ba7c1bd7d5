//! Minimal numeric kernel shared by the autoencoder and the CPC head.
//!
//! Every forward op is pure; every backward op returns exact gradients and is
//! checked against central finite differences in the test suite.

mod adam;
mod conv;
mod dense;
pub mod gradcheck;
mod gru;
mod scalar;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use conv::{conv2d, conv2d_backward, upsample2x, upsample2x_backward, Conv2dGrads, Conv2dSpec};
pub use dense::{dense, dense_backward, DenseGrads};
pub use gradcheck::{flatten, grad_check, unflatten, GradCheckReport};
pub use gru::{gru_step, gru_step_backward, GruCache, GruGrads, GruParams};
pub use scalar::{gemm, sigmoid, MatRef, Scalar};
pub use tensor::{checksum, Tensor};

#[allow(unused_imports)]
pub(crate) use tensor::fnv_mix;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch { op: &'static str, expected: String, found: String },
    #[error("non-finite {what} encountered")]
    Divergence { what: String },
}

impl NnError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        NnError::ShapeMismatch { op, expected: expected.to_string(), found: found.to_string() }
    }
}
