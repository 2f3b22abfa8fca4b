//! Dense row-major tensors with a recording tape for reverse-mode
//! differentiation, plus the `DVGTTEN1` tensor file format.

mod array;
mod error;
pub mod io;
pub mod kernels;
mod scalar;
mod tape;

pub use array::Tensor;
pub use error::{Result, TensorError};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
