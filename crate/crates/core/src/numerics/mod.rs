//! Dense tensor substrate: shapes, reductions, matrix products and softmax.

mod ops;
mod tensor;

pub(crate) use ops::softmax_row;
pub use ops::{
    concat_axis, concat_seq, matmul, reduce, slice_axis, slice_seq, softmax_lastdim, ReduceKind,
};
pub use tensor::Tensor;
