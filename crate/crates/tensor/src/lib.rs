//! Minimal dense-tensor engine with a reverse-mode autodiff tape.
//!
//! All values are `f64`, stored row-major. Image batches follow the
//! `(batch, channels, height, width)` convention. [`gradcheck`] compares
//! tape gradients against central finite differences.

mod error;
mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, OpKind, ScalarBits, Tape, Var};
pub use tensor::Tensor;

/// Output spatial size of a convolution or pooling window, `None` if the window does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    tape::conv_out_dim(input, kernel, stride, pad)
}
