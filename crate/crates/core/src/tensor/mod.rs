//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//! Provides exactly the operations the compression pipeline needs: matmul,
//! the two separable-convolution halves, norms, GELU/softmax, pooling,
//! embedding lookup and cross-entropy, plus slicing/concat plumbing.

mod array;
pub mod gradcheck;
mod kernels;
mod params;
pub mod serialize;
mod tape;

pub use array::Array;
pub use params::{ParamEntry, ParamId, Params};
pub use tape::{Tape, Var};

pub(crate) use kernels::{conv_out_dim, matmul_nn};
