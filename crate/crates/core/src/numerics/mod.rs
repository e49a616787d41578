//! Dense 64-bit matrices and the differentiable primitives built on them.

mod matrix;
pub mod ops;
pub mod tape;

pub use matrix::DenseMatrix;
pub use ops::{
    iterative_pinv, iterative_pinv_backward, layer_norm, layer_norm_backward, matmul,
    matmul_backward, matmul_nt, matmul_tn, segment_means, segment_means_backward, softmax_rows,
    softmax_rows_backward, DEFAULT_PINV_ITERS, EXACT_PINV_ITERS, LAYER_NORM_EPS,
};
pub use tape::{Gradients, Tape, Var};
